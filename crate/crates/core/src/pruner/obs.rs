//! Greedy group removal with optimal compensation of the surviving columns.
//!
//! For a layer `y = W x` with calibration Hessian `H = XᵀX`, removing column
//! group `G` and re-fitting the rest costs
//! `Σ_i W_{i,G} (H⁻¹_{GG})⁻¹ W_{i,G}ᵀ`, and the re-fit is
//! `δ = −W_{:,G} (H⁻¹_{GG})⁻¹ H⁻¹_{G,:}`. After each removal the inverse is
//! downdated so it stays the exact inverse over the surviving columns.

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::Range;

use nalgebra::DMatrix;

use super::hessian::HessianAccumulator;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMask {
    pub n_groups: usize,
    pub group_size: usize,
    pub pruned: BTreeSet<usize>,
}

impl GroupMask {
    pub fn empty(n_groups: usize, group_size: usize) -> Self {
        Self { n_groups, group_size, pruned: BTreeSet::new() }
    }

    pub fn columns(&self, group: usize) -> Range<usize> {
        group * self.group_size..(group + 1) * self.group_size
    }

    pub fn is_pruned(&self, group: usize) -> bool {
        self.pruned.contains(&group)
    }

    /// One flag per column, `true` where the column is removed.
    pub fn column_mask(&self) -> Vec<bool> {
        (0..self.n_groups * self.group_size).map(|c| self.is_pruned(c / self.group_size)).collect()
    }

    pub fn count(&self) -> usize {
        self.pruned.len()
    }
}

/// Number of groups removed at sparsity `s`: `⌊s · n_groups⌋`, with a small
/// tolerance so that e.g. `0.3 · 10` counts as 3.
pub fn groups_to_prune(sparsity: f64, n_groups: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Parameter(format!("sparsity {sparsity} outside [0, 1)")));
    }
    Ok(((sparsity * n_groups as f64) + 1e-9).floor() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub group: usize,
    pub saliency: f64,
    /// Running sum of saliencies up to and including this step.
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub mask: GroupMask,
    pub weights: DMatrix<f64>,
    /// `‖X Ŵᵀ − X Wᵀ‖²_F = tr(Δ H Δᵀ)` with the undamped Hessian.
    pub recon_error: f64,
    pub trace: Vec<TraceStep>,
}

impl PruneResult {
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,group,saliency,cumulative_error")?;
        for (i, s) in self.trace.iter().enumerate() {
            writeln!(out, "{i},{},{:?},{:?}", s.group, s.saliency, s.cumulative)?;
        }
        Ok(())
    }
}

/// `tr(Δ H Δᵀ)` for `Δ = after − before`.
pub fn reconstruction_error(before: &DMatrix<f64>, after: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let delta = after - before;
    (&delta * h).component_mul(&delta).sum().max(0.0)
}

fn invert_spd(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

/// Mutable state of one greedy run: current weights, current inverse and mask.
#[derive(Debug, Clone)]
pub struct ObsState {
    weights: DMatrix<f64>,
    hinv: DMatrix<f64>,
    mask: GroupMask,
}

impl ObsState {
    /// Inverts `damped_h` once. `weights` is `m × n` with `n` divisible by
    /// `group_size`.
    pub fn new(weights: DMatrix<f64>, damped_h: &DMatrix<f64>, group_size: usize) -> Result<Self> {
        let n = weights.ncols();
        if damped_h.shape() != (n, n) {
            return Err(shape_err(format!("{n}x{n} Hessian"), format!("{:?}", damped_h.shape())));
        }
        if group_size == 0 || !n.is_multiple_of(group_size) {
            return Err(Error::Parameter(format!("group size {group_size} does not divide {n} columns")));
        }
        let hinv = invert_spd(damped_h.clone(), "damped Hessian")?;
        Ok(Self { weights, hinv, mask: GroupMask::empty(n / group_size, group_size) })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Current inverse; rows and columns of removed groups are zero.
    pub fn hinv(&self) -> &DMatrix<f64> {
        &self.hinv
    }

    pub fn mask(&self) -> &GroupMask {
        &self.mask
    }

    fn block_inverse(&self, group: usize) -> Result<DMatrix<f64>> {
        let cols = self.mask.columns(group);
        let g = cols.len();
        let block = self.hinv.view((cols.start, cols.start), (g, g)).into_owned();
        if g == 1 {
            let d = block[(0, 0)];
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Numerical(format!("inverse diagonal {d} for group {group}")));
            }
            return Ok(DMatrix::from_element(1, 1, 1.0 / d));
        }
        invert_spd(block, &format!("inverse block of group {group}"))
    }

    pub fn saliency(&self, group: usize) -> Result<f64> {
        if group >= self.mask.n_groups || self.mask.is_pruned(group) {
            return Err(Error::Parameter(format!("group {group} is not available")));
        }
        let cols = self.mask.columns(group);
        let wg = self.weights.columns(cols.start, cols.len());
        let inv = self.block_inverse(group)?;
        Ok((wg * &inv).component_mul(&wg).sum().max(0.0))
    }

    /// Lowest-saliency surviving group; ties go to the lowest index.
    pub fn best_group(&self) -> Result<Option<(usize, f64)>> {
        let mut best: Option<(usize, f64)> = None;
        for g in 0..self.mask.n_groups {
            if self.mask.is_pruned(g) {
                continue;
            }
            let s = self.saliency(g)?;
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((g, s));
            }
        }
        Ok(best)
    }

    /// Removes `group`, compensates the other columns and downdates the inverse.
    pub fn remove(&mut self, group: usize) -> Result<()> {
        if group >= self.mask.n_groups || self.mask.is_pruned(group) {
            return Err(Error::Parameter(format!("group {group} is not available")));
        }
        let cols = self.mask.columns(group);
        let (c0, g) = (cols.start, cols.len());
        let inv = self.block_inverse(group)?;
        let hinv_g_rows = self.hinv.rows(c0, g).into_owned();
        let wg = self.weights.columns(c0, g).into_owned();
        // δ = −W_G (H⁻¹_GG)⁻¹ H⁻¹_G,:
        self.weights -= (&wg * &inv) * &hinv_g_rows;
        // H⁻¹ ← H⁻¹ − H⁻¹_:,G (H⁻¹_GG)⁻¹ H⁻¹_G,:
        let correction = hinv_g_rows.transpose() * &inv * &hinv_g_rows;
        self.hinv -= correction;
        self.weights.columns_mut(c0, g).fill(0.0);
        self.hinv.rows_mut(c0, g).fill(0.0);
        self.hinv.columns_mut(c0, g).fill(0.0);
        self.mask.pruned.insert(group);
        Ok(())
    }
}

/// Greedily removes `⌊s · n_groups⌋` column groups from `weights` (`m × n`),
/// compensating the survivors after every removal.
pub fn prune_layer(weights: &DMatrix<f64>, acc: &HessianAccumulator, sparsity: f64, group_size: usize) -> Result<PruneResult> {
    let n = weights.ncols();
    if acc.dim() != n {
        return Err(shape_err(format!("Hessian of dim {n}"), acc.dim()));
    }
    if group_size == 0 || !n.is_multiple_of(group_size) {
        return Err(Error::Parameter(format!("group size {group_size} does not divide {n} columns")));
    }
    let n_groups = n / group_size;
    let k = groups_to_prune(sparsity, n_groups)?;
    if k == 0 {
        return Ok(PruneResult {
            mask: GroupMask::empty(n_groups, group_size),
            weights: weights.clone(),
            recon_error: 0.0,
            trace: Vec::new(),
        });
    }
    let mut state = ObsState::new(weights.clone(), &acc.damped(), group_size)?;
    let mut trace = Vec::with_capacity(k);
    let mut cumulative = 0.0;
    for _ in 0..k {
        let (group, saliency) = state
            .best_group()?
            .ok_or_else(|| Error::Internal("no group left to prune".into()))?;
        state.remove(group)?;
        cumulative += saliency;
        trace.push(TraceStep { group, saliency, cumulative });
    }
    let ObsState { weights: mut pruned, mask, .. } = state;
    for (c, &masked) in mask.column_mask().iter().enumerate() {
        if masked {
            pruned.column_mut(c).fill(0.0);
        }
    }
    if pruned.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite compensated weights".into()));
    }
    let recon_error = reconstruction_error(weights, &pruned, acc.hessian());
    Ok(PruneResult { mask, weights: pruned, recon_error, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn acc_from(x: &DMatrix<f64>, damping: f64) -> HessianAccumulator {
        let mut acc = HessianAccumulator::with_damping(x.ncols(), damping).unwrap();
        acc.accumulate_f64(x).unwrap();
        acc
    }

    /// Minimizer of ‖X Ŵᵀ − X Wᵀ‖² over Ŵ with the masked columns fixed at zero,
    /// one output row at a time by an SVD least-squares solve.
    fn ls_oracle(w: &DMatrix<f64>, x: &DMatrix<f64>, masked: &[bool]) -> DMatrix<f64> {
        let keep: Vec<usize> = (0..w.ncols()).filter(|&c| !masked[c]).collect();
        let xs = x.select_columns(&keep);
        let svd = xs.clone().svd(true, true);
        let mut out = DMatrix::zeros(w.nrows(), w.ncols());
        for i in 0..w.nrows() {
            let target = x * w.row(i).transpose();
            let sol = svd.solve(&target, 1e-14).unwrap();
            for (k, &c) in keep.iter().enumerate() {
                out[(i, c)] = sol[k];
            }
        }
        out
    }

    fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).norm() <= tol * b.norm().max(1e-300)
    }

    #[test]
    fn zero_sparsity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random(3, 4, &mut rng);
        let x = random(10, 4, &mut rng);
        let r = prune_layer(&w, &acc_from(&x, 0.01), 0.0, 1).unwrap();
        assert_eq!(r.weights, w);
        assert_eq!(r.recon_error, 0.0);
        assert_eq!(r.mask.count(), 0);
    }

    #[test]
    fn zero_column_group_has_zero_saliency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = random(3, 4, &mut rng);
        w.column_mut(2).fill(0.0);
        let x = random(10, 4, &mut rng);
        let st = ObsState::new(w, &acc_from(&x, 0.0).damped(), 1).unwrap();
        assert_eq!(st.saliency(2).unwrap(), 0.0);
        assert_eq!(st.best_group().unwrap().unwrap().0, 2);
    }

    #[test]
    fn diagonal_hessian_saliency() {
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5, 3.0]));
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 1.0, 2.0]);
        let st = ObsState::new(w.clone(), &h, 1).unwrap();
        for j in 0..3 {
            let expected = h[(j, j)] * w.column(j).norm_squared();
            assert!((st.saliency(j).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn block_saliency_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(3, 4, &mut rng);
        let x = random(20, 4, &mut rng);
        let acc = acc_from(&x, 0.0);
        let st = ObsState::new(w.clone(), &acc.damped(), 2).unwrap();
        for g in 0..2 {
            let masked: Vec<bool> = (0..4).map(|c| c / 2 == g).collect();
            let fit = ls_oracle(&w, &x, &masked);
            let err = reconstruction_error(&w, &fit, acc.hessian());
            let s = st.saliency(g).unwrap();
            assert!((s - err).abs() <= 1e-9 * err, "{s} vs {err}");
        }
    }

    #[test]
    fn greedy_result_is_optimal_for_its_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(4, 6, &mut rng);
        let x = random(32, 6, &mut rng);
        let acc = acc_from(&x, 0.0);
        let r = prune_layer(&w, &acc, 0.5, 1).unwrap();
        assert_eq!(r.mask.count(), 3);
        let oracle = ls_oracle(&w, &x, &r.mask.column_mask());
        assert!(rel_close(&r.weights, &oracle, 1e-8));
        // exhaustive enumeration of all C(6, 3) masks
        let mut errs = Vec::new();
        for bits in 0u32..64 {
            if bits.count_ones() != 3 {
                continue;
            }
            let masked: Vec<bool> = (0..6).map(|c| bits >> c & 1 == 1).collect();
            errs.push(reconstruction_error(&w, &ls_oracle(&w, &x, &masked), acc.hessian()));
        }
        assert_eq!(errs.len(), 20);
        let lo = errs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = errs.iter().cloned().fold(0.0, f64::max);
        assert!(r.recon_error >= lo * (1.0 - 1e-9) && r.recon_error <= hi * (1.0 + 1e-9));
        assert!((r.trace.last().unwrap().cumulative - r.recon_error).abs() <= 1e-8 * r.recon_error);
    }

    #[test]
    fn diagonal_hessian_leaves_survivors_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(3, 8, &mut rng);
        // orthogonal inputs: scaled identity rows
        let x = DMatrix::from_fn(8, 8, |i, j| if i == j { 1.0 + i as f64 } else { 0.0 });
        let r = prune_layer(&w, &acc_from(&x, 0.01), 0.5, 2).unwrap();
        for c in 0..8 {
            if !r.mask.column_mask()[c] {
                assert_eq!(r.weights.column(c), w.column(c));
            }
        }
    }

    #[test]
    fn masked_columns_are_exact_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(5, 12, &mut rng);
        let x = random(6, 12, &mut rng);
        let r = prune_layer(&w, &acc_from(&x, 0.01), 0.5, 3).unwrap();
        assert_eq!(r.mask.count(), 2);
        for (c, &m) in r.mask.column_mask().iter().enumerate() {
            if m {
                assert!(r.weights.column(c).iter().all(|v| v.to_bits() == 0));
            }
        }
    }

    #[test]
    fn errors() {
        let w = DMatrix::zeros(2, 4);
        let acc = HessianAccumulator::new(4);
        assert!(prune_layer(&w, &acc, 1.0, 1).is_err());
        assert!(prune_layer(&w, &acc, 0.5, 3).is_err());
        assert!(prune_layer(&w, &HessianAccumulator::new(3), 0.5, 1).is_err());
        assert_eq!(groups_to_prune(0.3, 10).unwrap(), 3);
        assert_eq!(groups_to_prune(0.49, 4).unwrap(), 1);
    }

    #[test]
    fn trace_csv() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(2, 4, &mut rng);
        let x = random(8, 4, &mut rng);
        let r = prune_layer(&w, &acc_from(&x, 0.01), 0.5, 1).unwrap();
        let mut buf = Vec::new();
        r.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("step,group,saliency,cumulative_error\n0,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn downdated_inverse_matches_fresh_inverse(seed in any::<u64>(), n in 4usize..16, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(3, n, &mut rng);
            let x = random(n + 8, n, &mut rng);
            let h = acc_from(&x, 0.01).damped();
            let mut st = ObsState::new(w, &h, 1).unwrap();
            for _ in 0..k.min(n - 1) {
                let (g, _) = st.best_group().unwrap().unwrap();
                st.remove(g).unwrap();
            }
            let keep: Vec<usize> = (0..n).filter(|&c| !st.mask().is_pruned(c)).collect();
            let fresh = h.select_rows(&keep).select_columns(&keep).try_inverse().unwrap();
            let kept = st.hinv().select_rows(&keep).select_columns(&keep);
            prop_assert!(rel_close(&kept, &fresh, 1e-8));
        }

        #[test]
        fn compensation_never_hurts(seed in any::<u64>(), m in 1usize..8, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(m, n, &mut rng);
            let x = random(32, n, &mut rng);
            let acc = acc_from(&x, 0.0);
            let r = prune_layer(&w, &acc, 0.5, 1).unwrap();
            let mut zeroed = w.clone();
            for (c, &masked) in r.mask.column_mask().iter().enumerate() {
                if masked {
                    zeroed.column_mut(c).fill(0.0);
                }
            }
            let plain = reconstruction_error(&w, &zeroed, acc.hessian());
            prop_assert!(r.recon_error <= plain * (1.0 + 1e-10) + 1e-12);
        }
    }
}
