//! Stage-matched calibration batches and per-layer Hessian capture.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pruner::HessianAccumulator;
use crate::schedule::NoiseSchedule;
use crate::toydiffusion::{Denoiser, ToyDataset};

/// Items per forward pass during capture.
const CAPTURE_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationItem {
    pub id: usize,
    /// Index of the clean image in the source dataset.
    pub source: usize,
    pub x_t: Array1<f32>,
    pub t: usize,
    pub label: usize,
    /// When set, the item is also fed with the null label, same `x_t` and `t`.
    pub cfg_duplicated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub items: Vec<CalibrationItem>,
    /// Inclusive timestep range the items were drawn from.
    pub stage_range: (usize, usize),
    pub null_class: usize,
}

impl CalibrationSet {
    /// Rows the model sees: one per item plus one per null-label duplicate.
    pub fn forward_rows(&self) -> usize {
        self.items.iter().map(|i| if i.cfg_duplicated { 2 } else { 1 }).sum()
    }

    /// Model inputs for `items`, null-label duplicates appended after the labeled rows.
    pub fn batch(&self, items: &[CalibrationItem]) -> (Array2<f32>, Vec<usize>, Vec<usize>) {
        let mut rows: Vec<(&Array1<f32>, usize, usize)> = items.iter().map(|i| (&i.x_t, i.t, i.label)).collect();
        rows.extend(items.iter().filter(|i| i.cfg_duplicated).map(|i| (&i.x_t, i.t, self.null_class)));
        let d = items.first().map_or(0, |i| i.x_t.len());
        let mut x = Array2::zeros((rows.len(), d));
        for (r, (xt, _, _)) in rows.iter().enumerate() {
            x.row_mut(r).assign(xt);
        }
        let t = rows.iter().map(|r| r.1).collect();
        let c = rows.iter().map(|r| r.2).collect();
        (x, t, c)
    }

    /// Audit listing: `id t label cfg source` per line after a header.
    pub fn write_manifest<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "stage_range={}..={}", self.stage_range.0, self.stage_range.1)?;
        writeln!(out, "null_class={}", self.null_class)?;
        writeln!(out, "id t label cfg source")?;
        for i in &self.items {
            writeln!(out, "{} {} {} {} {}", i.id, i.t, i.label, u8::from(i.cfg_duplicated), i.source)?;
        }
        Ok(())
    }
}

/// Draws `n` noised items with timesteps uniform over the inclusive
/// `stage_range`. Item `k` uses stream `k` of a generator seeded with `seed`,
/// so the result does not depend on generation order.
pub fn build_calibration(
    data: &ToyDataset,
    stage_range: (usize, usize),
    schedule: &NoiseSchedule,
    n: usize,
    cfg_enabled: bool,
    null_class: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (lo, hi) = stage_range;
    if lo == 0 || lo > hi || hi > schedule.horizon() {
        return Err(Error::Parameter(format!("stage range {lo}..={hi} invalid for T = {}", schedule.horizon())));
    }
    if n == 0 {
        return Err(Error::Parameter("calibration size must be positive".into()));
    }
    let mut items = Vec::with_capacity(n);
    for id in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let source = rng.random_range(0..data.len());
        let t = rng.random_range(lo..=hi);
        let ab = schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let x_t = data.image(source).mapv(|x0| {
            let e: f32 = StandardNormal.sample(&mut rng);
            a * x0 + b * e
        });
        items.push(CalibrationItem { id, source, x_t, t, label: data.labels[source], cfg_duplicated: cfg_enabled });
    }
    Ok(CalibrationSet { items, stage_range, null_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sublayer {
    AttnOutProj,
    MlpDownProj,
}

impl fmt::Display for Sublayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sublayer::AttnOutProj => "attn_out_proj",
            Sublayer::MlpDownProj => "mlp_down_proj",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub sublayer: Sublayer,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.sublayer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerHessianSet {
    pub layers: BTreeMap<LayerId, HessianAccumulator>,
}

impl LayerHessianSet {
    pub fn get(&self, block: usize, sublayer: Sublayer) -> Result<&HessianAccumulator> {
        self.layers
            .get(&LayerId { block, sublayer })
            .ok_or_else(|| Error::Internal(format!("no Hessian for blocks.{block}.{sublayer}")))
    }

    pub fn merge(&mut self, other: &LayerHessianSet) -> Result<()> {
        for (id, acc) in &other.layers {
            match self.layers.get_mut(id) {
                Some(mine) => mine.merge(acc)?,
                None => return Err(Error::Internal(format!("layer {id} missing from merge target"))),
            }
        }
        Ok(())
    }
}

/// Runs every calibration row through `model` and accumulates the inputs of
/// each block's attention output projection and MLP down projection.
pub fn capture_hessians(model: &Denoiser, calib: &CalibrationSet, damping: f64) -> Result<LayerHessianSet> {
    let cfg = model.config();
    let mut layers = BTreeMap::new();
    for block in 0..cfg.blocks {
        layers.insert(LayerId { block, sublayer: Sublayer::AttnOutProj }, HessianAccumulator::with_damping(cfg.d_model, damping)?);
        layers.insert(LayerId { block, sublayer: Sublayer::MlpDownProj }, HessianAccumulator::with_damping(cfg.hidden(), damping)?);
    }
    for chunk in calib.items.chunks(CAPTURE_CHUNK) {
        let (x, t, c) = calib.batch(chunk);
        let (_, cache) = model.forward_cached(x.view(), &t, &c)?;
        for (id, acc) in layers.iter_mut() {
            let input = match id.sublayer {
                Sublayer::AttnOutProj => cache.attn_out_input(id.block),
                Sublayer::MlpDownProj => cache.mlp_down_input(id.block),
            };
            if input.iter().any(|v| !v.is_finite()) {
                return Err(Error::Capture(format!("non-finite activations entering {id}")));
            }
            acc.accumulate(input)?;
        }
    }
    Ok(LayerHessianSet { layers })
}
