//! Running `XᵀX` sums over layer inputs.

use nalgebra::DMatrix;
use ndarray::ArrayView2;

use crate::error::{shape_err, Error, Result};

/// Default ridge, relative to the mean Hessian diagonal.
pub const DEFAULT_DAMPING: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    h: DMatrix<f64>,
    samples: usize,
    /// Ridge added before inversion as `damping · mean(diag H)`. When the
    /// diagonal is entirely zero, `damping` itself is used.
    pub damping: f64,
}

impl HessianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { h: DMatrix::zeros(dim, dim), samples: 0, damping: DEFAULT_DAMPING }
    }

    pub fn with_damping(dim: usize, damping: f64) -> Result<Self> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(Error::Parameter(format!("damping {damping} must be finite and non-negative")));
        }
        Ok(Self { damping, ..Self::new(dim) })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Adds `XᵀX` for a batch whose rows are input vectors.
    pub fn accumulate(&mut self, x: ArrayView2<f32>) -> Result<()> {
        let x64 = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| f64::from(x[[i, j]]));
        self.accumulate_f64(&x64)
    }

    pub fn accumulate_f64(&mut self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(shape_err(format!("{} columns", self.dim()), x.ncols()));
        }
        if x.nrows() == 0 {
            return Err(Error::Parameter("empty batch".into()));
        }
        self.h.gemm_tr(1.0, x, x, 1.0);
        self.samples += x.nrows();
        Ok(())
    }

    /// Folds a partial sum computed elsewhere into this one.
    pub fn merge(&mut self, other: &HessianAccumulator) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(shape_err(format!("dim {}", self.dim()), other.dim()));
        }
        self.h += &other.h;
        self.samples += other.samples;
        Ok(())
    }

    /// Absolute ridge that [`Self::damped`] adds to the diagonal.
    pub fn ridge(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 0.0;
        }
        let mean = self.h.diagonal().sum() / n as f64;
        if mean > 0.0 {
            self.damping * mean
        } else {
            self.damping
        }
    }

    pub fn damped(&self) -> DMatrix<f64> {
        let mut h = self.h.clone();
        let r = self.ridge();
        for i in 0..self.dim() {
            h[(i, i)] += r;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_row_outer_product() {
        let mut acc = HessianAccumulator::new(2);
        acc.accumulate(array![[1.0f32, 2.0]].view()).unwrap();
        assert_eq!(acc.hessian(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        assert_eq!(acc.samples(), 1);
    }

    #[test]
    fn identical_batches_double() {
        let x = array![[0.5f32, -1.0, 3.0], [2.0, 0.25, -0.75]];
        let mut once = HessianAccumulator::new(3);
        once.accumulate(x.view()).unwrap();
        let mut twice = once.clone();
        twice.accumulate(x.view()).unwrap();
        assert_eq!(twice.hessian(), &(once.hessian() * 2.0));
        assert_eq!(twice.samples(), 4);
    }

    #[test]
    fn merge_matches_sequential() {
        let a = array![[1.0f32, 2.0], [3.0, 4.0]];
        let b = array![[-1.0f32, 0.5]];
        let mut seq = HessianAccumulator::new(2);
        seq.accumulate(a.view()).unwrap();
        seq.accumulate(b.view()).unwrap();
        let mut left = HessianAccumulator::new(2);
        left.accumulate(a.view()).unwrap();
        let mut right = HessianAccumulator::new(2);
        right.accumulate(b.view()).unwrap();
        left.merge(&right).unwrap();
        assert_eq!(left, seq);
    }

    #[test]
    fn shape_and_damping() {
        let mut acc = HessianAccumulator::new(3);
        assert!(acc.accumulate(array![[1.0f32, 2.0]].view()).is_err());
        assert_eq!(acc.ridge(), DEFAULT_DAMPING);
        acc.accumulate(array![[3.0f32, 0.0, 0.0]].view()).unwrap();
        // mean diagonal is 3
        assert!((acc.ridge() - 0.03).abs() < 1e-15);
        assert!(acc.damped().cholesky().is_some());
        assert!(HessianAccumulator::with_damping(2, -1.0).is_err());
    }
}
