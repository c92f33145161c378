//! Head and neuron pruning for transformer blocks.
//!
//! Heads are column groups of the attention output projection; removing one
//! also zeroes its query, key and value rows so it contributes nothing.
//! Neurons are single columns of the MLP down projection; removing one zeroes
//! the matching up-projection row and bias entry.

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2};

use super::hessian::HessianAccumulator;
use super::obs::{groups_to_prune, prune_layer, PruneResult};
use crate::error::{Error, Result};
use crate::toydiffusion::model::Block;

pub fn to_dmatrix(w: ArrayView2<f32>) -> DMatrix<f64> {
    DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| f64::from(w[[i, j]]))
}

pub fn to_array(w: &DMatrix<f64>) -> Array2<f32> {
    Array2::from_shape_fn((w.nrows(), w.ncols()), |(i, j)| w[(i, j)] as f32)
}

/// Prunes `⌊s · heads⌋` heads using `acc` captured on the out-projection input.
pub fn prune_attention_block(block: &Block, acc: &HessianAccumulator, sparsity: f64, heads: usize) -> Result<(Block, PruneResult)> {
    let d = block.out_proj.weight.ncols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Parameter(format!("{heads} heads do not divide width {d}")));
    }
    let k = groups_to_prune(sparsity, heads)?;
    if k >= heads {
        return Err(Error::AllHeadsPruned { heads });
    }
    let dh = d / heads;
    let result = prune_layer(&to_dmatrix(block.out_proj.weight.view()), acc, sparsity, dh)?;
    let mut out = block.clone();
    if result.mask.count() == 0 {
        return Ok((out, result));
    }
    out.out_proj.weight = to_array(&result.weights);
    for &h in &result.mask.pruned {
        for third in 0..3 {
            let rows = third * d + h * dh..third * d + (h + 1) * dh;
            out.qkv.weight.slice_mut(s![rows.clone(), ..]).fill(0.0);
            out.qkv.bias.slice_mut(s![rows]).fill(0.0);
        }
    }
    Ok((out, result))
}

/// Prunes `⌊s · hidden⌋` intermediate neurons using `acc` captured on the
/// down-projection input.
pub fn prune_mlp_block(block: &Block, acc: &HessianAccumulator, sparsity: f64) -> Result<(Block, PruneResult)> {
    let result = prune_layer(&to_dmatrix(block.mlp_down.weight.view()), acc, sparsity, 1)?;
    let mut out = block.clone();
    if result.mask.count() == 0 {
        return Ok((out, result));
    }
    out.mlp_down.weight = to_array(&result.weights);
    for &j in &result.mask.pruned {
        out.mlp_up.weight.row_mut(j).fill(0.0);
        out.mlp_up.bias[j] = 0.0;
    }
    Ok((out, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydiffusion::model::{Denoiser, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn setup() -> (Denoiser, Array2<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = Denoiser::init(ModelConfig::default(), &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((8 * 16, 64), || StandardNormal.sample(&mut rng));
        (model, x)
    }

    fn sq_dist(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
        a.iter().zip(b).map(|(p, q)| f64::from(p - q).powi(2)).sum()
    }

    #[test]
    fn zero_sparsity_unchanged() {
        let (model, _) = setup();
        let b = &model.blocks[0];
        let (pa, ra) = prune_attention_block(b, &HessianAccumulator::new(64), 0.2, 4).unwrap();
        assert_eq!(&pa, b);
        assert_eq!(ra.mask.count(), 0);
        let (pm, _) = prune_mlp_block(b, &HessianAccumulator::new(256), 0.0).unwrap();
        assert_eq!(&pm, b);
    }

    #[test]
    fn silent_head_goes_first() {
        let (model, x) = setup();
        let mut b = model.blocks[1].clone();
        b.out_proj.weight.slice_mut(s![.., 48..64]).fill(0.0);
        let (concat, _, _) = b.attention_heads(x.view(), 4, 16);
        let mut acc = HessianAccumulator::new(64);
        acc.accumulate(concat.view()).unwrap();
        let (_, r) = prune_attention_block(&b, &acc, 0.25, 4).unwrap();
        assert_eq!(r.mask.pruned.iter().copied().collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn all_heads_refused() {
        let (model, _) = setup();
        let err = prune_attention_block(&model.blocks[0], &HessianAccumulator::new(64), 0.9999999999, 4).unwrap_err();
        assert!(matches!(err, Error::AllHeadsPruned { heads: 4 }));
    }

    #[test]
    fn attention_output_error_matches_reported() {
        let (model, x) = setup();
        let b = &model.blocks[2];
        let (concat, _, _) = b.attention_heads(x.view(), 4, 16);
        let mut acc = HessianAccumulator::with_damping(64, 0.0).unwrap();
        acc.accumulate(concat.view()).unwrap();
        let (pruned, r) = prune_attention_block(b, &acc, 0.5, 4).unwrap();
        assert_eq!(r.mask.count(), 2);
        let mut m = model.clone();
        m.blocks[2] = pruned.clone();
        assert_eq!(m.active_heads(2), 2);
        let dense = b.attention(x.view(), 4, 16);
        let after = pruned.attention(x.view(), 4, 16);
        let dist = sq_dist(&after, &dense);
        assert!((dist - r.recon_error).abs() <= 1e-3 * r.recon_error, "{dist} vs {}", r.recon_error);
    }

    #[test]
    fn mlp_output_error_matches_reported() {
        let (model, x) = setup();
        let b = &model.blocks[3];
        let hidden = b.mlp_hidden(x.view());
        let mut acc = HessianAccumulator::new(256);
        acc.accumulate(hidden.view()).unwrap();
        let (pruned, r) = prune_mlp_block(b, &acc, 0.25).unwrap();
        assert_eq!(r.mask.count(), 64);
        let mut m = model.clone();
        m.blocks[3] = pruned.clone();
        assert_eq!(m.active_neurons(3), 192);
        let dist = sq_dist(&pruned.mlp(x.view()), &b.mlp(x.view()));
        assert!((dist - r.recon_error).abs() <= 1e-3 * r.recon_error, "{dist} vs {}", r.recon_error);
    }
}
