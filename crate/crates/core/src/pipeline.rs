//! Divide, prune, and sample with one sub-network per stage; evaluation
//! against the dense parent.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::calibration::{build_calibration, capture_hessians, LayerId, Sublayer};
use crate::error::{Error, Result};
use crate::pruner::{prune_attention_block, prune_mlp_block, PruneResult, DEFAULT_DAMPING};
use crate::schedule::{GradUnit, NoiseSchedule, PowerAssumption, ScoreCurve};
use crate::toydiffusion::{denoising_loss, sample_with, Checkpoint, Denoiser, SampleOutput, Sampler, ToyDataset};
use crate::trajectory::{allocate_sparsity, divide_stages, StagePlan, Weighting, DEFAULT_MAX_SPARSITY, NUM_STAGES};

/// splitmix64 finalizer, used to give every stage, chunk, etc. its own seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivideOptions {
    pub lambda: f64,
    pub threshold_fraction: f64,
    pub powers: PowerAssumption,
    pub unit: GradUnit,
    pub target_aggregate: f64,
    pub weighting: Weighting,
    pub max_sparsity: f64,
}

impl Default for DivideOptions {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            threshold_fraction: 0.55,
            powers: PowerAssumption::default(),
            unit: GradUnit::default(),
            target_aggregate: 0.0,
            weighting: Weighting::StepWeighted { steps: 20 },
            max_sparsity: DEFAULT_MAX_SPARSITY,
        }
    }
}

/// Score curve, stage dividers and budget allocation in one call.
pub fn run_divide(schedule: &NoiseSchedule, opts: &DivideOptions) -> Result<(StagePlan, ScoreCurve)> {
    let curve = schedule.score_curve(opts.lambda, opts.powers, opts.unit)?;
    let dividers = divide_stages(&curve, opts.threshold_fraction)?;
    let mut plan = StagePlan::new(schedule.horizon(), dividers)?;
    plan.threshold_fraction = Some(opts.threshold_fraction);
    plan.lambda = Some(opts.lambda);
    let plan = allocate_sparsity(&plan, &curve, opts.target_aggregate, opts.weighting, opts.max_sparsity)?;
    Ok((plan, curve))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneOptions {
    pub n_calib: usize,
    pub cfg_enabled: bool,
    pub damping: f64,
    pub seed: u64,
    /// Prune the three stages concurrently on the rayon pool.
    pub parallel: bool,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self { n_calib: 1024, cfg_enabled: true, damping: DEFAULT_DAMPING, seed: 0, parallel: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: LayerId,
    pub result: PruneResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub sparsity: f64,
    /// Empty when the stage was left dense.
    pub layers: Vec<LayerReport>,
}

/// Dense parent plus one sub-network per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicModel {
    pub dense: Denoiser,
    pub stages: Vec<Denoiser>,
    pub plan: StagePlan,
}

impl MosaicModel {
    /// Every stage uses the dense weights.
    pub fn all_dense(dense: Denoiser, plan: StagePlan) -> Self {
        Self { stages: vec![dense.clone(); NUM_STAGES], dense, plan }
    }

    pub fn stage_model(&self, t: usize) -> Result<(usize, &Denoiser)> {
        let stage = self.plan.stage_of(t).map_err(|e| Error::Internal(format!("dispatch at t = {t}: {e}")))?;
        Ok((stage, &self.stages[stage]))
    }

    /// Writes `plan.txt` and `stage{i}.ckpt` into `dir`. Every stage
    /// checkpoint carries `meta`, so an unpruned stage is byte-identical to a
    /// dense checkpoint saved with the same metadata.
    pub fn save(&self, dir: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("plan.txt"), self.plan.to_text())?;
        for (i, m) in self.stages.iter().enumerate() {
            let ck = Checkpoint { model: m.clone(), meta: meta.clone() };
            ck.save(&dir.join(format!("stage{i}.ckpt")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, dense: Denoiser) -> Result<Self> {
        let plan = StagePlan::from_text(&fs::read_to_string(dir.join("plan.txt"))?)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let m = Checkpoint::load(&dir.join(format!("stage{i}.ckpt")))?.model;
            if m.config() != dense.config() {
                return Err(Error::Checkpoint(format!("stage {i} architecture differs from the dense model")));
            }
            stages.push(m);
        }
        Ok(Self { dense, stages, plan })
    }
}

fn prune_stage(
    dense: &Denoiser,
    plan: &StagePlan,
    stage: usize,
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    opts: &PruneOptions,
) -> Result<(Denoiser, StageReport)> {
    let sparsity = plan.sparsities[stage];
    let mut report = StageReport { stage, sparsity, layers: Vec::new() };
    let cfg = *dense.config();
    let nothing_to_remove = crate::pruner::groups_to_prune(sparsity, cfg.heads)? == 0
        && crate::pruner::groups_to_prune(sparsity, cfg.hidden())? == 0;
    if nothing_to_remove {
        return Ok((dense.clone(), report));
    }
    let calib = build_calibration(
        data,
        plan.stage_range(stage),
        schedule,
        opts.n_calib,
        opts.cfg_enabled,
        cfg.null_class(),
        derive_seed(opts.seed, stage as u64),
    )?;
    let hessians = capture_hessians(dense, &calib, opts.damping)?;
    let mut model = dense.clone();
    for b in 0..cfg.blocks {
        let (block, attn) = prune_attention_block(&model.blocks[b], hessians.get(b, Sublayer::AttnOutProj)?, sparsity, cfg.heads)?;
        let (block, mlp) = prune_mlp_block(&block, hessians.get(b, Sublayer::MlpDownProj)?, sparsity)?;
        model.blocks[b] = block;
        report.layers.push(LayerReport { layer: LayerId { block: b, sublayer: Sublayer::AttnOutProj }, result: attn });
        report.layers.push(LayerReport { layer: LayerId { block: b, sublayer: Sublayer::MlpDownProj }, result: mlp });
    }
    Ok((model, report))
}

/// Builds one sub-network per stage from stage-matched calibration data. The
/// dense model is not modified. Each stage's calibration seed depends only on
/// `opts.seed` and the stage index.
pub fn run_prune(
    dense: &Denoiser,
    plan: &StagePlan,
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    opts: &PruneOptions,
) -> Result<(MosaicModel, Vec<StageReport>)> {
    plan.validate()?;
    if plan.horizon != schedule.horizon() {
        return Err(Error::Parameter(format!(
            "plan horizon {} differs from schedule horizon {}",
            plan.horizon,
            schedule.horizon()
        )));
    }
    let job = |stage: usize| prune_stage(dense, plan, stage, data, schedule, opts);
    let results: Vec<Result<(Denoiser, StageReport)>> = if opts.parallel {
        (0..NUM_STAGES).into_par_iter().map(job).collect()
    } else {
        (0..NUM_STAGES).map(job).collect()
    };
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut reports = Vec::with_capacity(NUM_STAGES);
    for r in results {
        let (m, rep) = r?;
        stages.push(m);
        reports.push(rep);
    }
    Ok((MosaicModel { dense: dense.clone(), stages, plan: plan.clone() }, reports))
}

/// Samples with per-stage dispatch; `dispatch` in the output records
/// `(t, stage)` for every denoiser call.
pub fn mosaic_sample(
    mosaic: &MosaicModel,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    classes: &[usize],
    cfg_scale: f32,
    seed: u64,
) -> Result<SampleOutput> {
    sample_with(
        |t| mosaic.stage_model(t),
        schedule,
        sampler,
        classes,
        mosaic.dense.config().pixels(),
        cfg_scale,
        seed,
        false,
    )
}

/// Multiply-accumulates of one single-image forward pass, counting only matrix
/// products. Heads whose out-projection columns are all zero and neurons whose
/// down-projection column is zero are treated as removed.
pub fn forward_macs(model: &Denoiser) -> u64 {
    let c = model.config();
    let (n, d, p) = (c.tokens() as u64, c.d_model as u64, c.patch_dim() as u64);
    let dh = c.head_dim() as u64;
    let mut total = n * p * d // patch embedding
        + 2 * d * d // timestep MLP
        + n * d * p; // output head
    for b in 0..c.blocks {
        let heads = model.active_heads(b) as u64;
        let neurons = model.active_neurons(b) as u64;
        total += n * d * 3 * heads * dh // q, k, v
            + 2 * n * n * dh * heads // scores and weighted values
            + n * heads * dh * d // out projection
            + 2 * n * d * neurons; // MLP up and down
    }
    total
}

/// MACs of a `steps`-step sampling run of one image.
pub fn mac_count(model: &Denoiser, steps: usize) -> u64 {
    forward_macs(model) * steps as u64
}

/// MACs of a `steps`-step DDIM run of one image with per-stage dispatch.
pub fn mosaic_mac_count(mosaic: &MosaicModel, steps: usize) -> Result<u64> {
    let counts = mosaic.plan.step_counts(steps)?;
    Ok(counts.iter().zip(&mosaic.stages).map(|(&k, m)| k as u64 * forward_macs(m)).sum())
}

/// Fraction of prunable groups removed, averaged over all attention and MLP layers.
pub fn realized_sparsity(model: &Denoiser) -> f64 {
    let c = model.config();
    let mut sum = 0.0;
    for b in 0..c.blocks {
        sum += 1.0 - model.active_heads(b) as f64 / c.heads as f64;
        sum += 1.0 - model.active_neurons(b) as f64 / c.hidden() as f64;
    }
    sum / (2 * c.blocks) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub n_eval: usize,
    pub sampler: Sampler,
    pub cfg_scale: f32,
    pub seed: u64,
    /// Samples per sampling call; each chunk draws from its own derived seed.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_eval: 256, sampler: Sampler::Ddim { steps: 20 }, cfg_scale: 1.0, seed: 0, chunk: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    /// Per-sample mean squared distance between mosaic and dense outputs.
    pub divergences: Vec<f64>,
    pub divergence: f64,
    /// Held-out noise-prediction loss of each stage's sub-network on its own range.
    pub stage_losses: [f64; NUM_STAGES],
    pub macs: u64,
    pub dense_macs: u64,
    pub realized_sparsities: [f64; NUM_STAGES],
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "label,divergence,macs,dense_macs,loss_stage0,loss_stage1,loss_stage2,sparsity_stage0,sparsity_stage1,sparsity_stage2";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.label,
            self.divergence,
            self.macs,
            self.dense_macs,
            self.stage_losses[0],
            self.stage_losses[1],
            self.stage_losses[2],
            self.realized_sparsities[0],
            self.realized_sparsities[1],
            self.realized_sparsities[2]
        )
    }

    pub fn write_csv<W: Write>(reports: &[EvalReport], mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in reports {
            writeln!(out, "{}", r.csv_row())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "label={}\ndivergence={:?}\nmacs={}\ndense_macs={}\nstage_losses={:?},{:?},{:?}\nrealized_sparsities={:?},{:?},{:?}\n",
            self.label,
            self.divergence,
            self.macs,
            self.dense_macs,
            self.stage_losses[0],
            self.stage_losses[1],
            self.stage_losses[2],
            self.realized_sparsities[0],
            self.realized_sparsities[1],
            self.realized_sparsities[2]
        )
    }
}

fn per_sample_distance(a: &SampleOutput, b: &SampleOutput) -> Vec<f64> {
    a.samples
        .rows()
        .into_iter()
        .zip(b.samples.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| f64::from(p - q).powi(2)).sum::<f64>() / x.len() as f64)
        .collect()
}

/// Paired divergence from the dense parent plus loss, MAC and sparsity figures.
/// Sample `i` uses class `i mod classes` and the same noise for both models.
pub fn evaluate(
    mosaic: &MosaicModel,
    label: &str,
    held_out: &ToyDataset,
    schedule: &NoiseSchedule,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.n_eval == 0 || opts.chunk == 0 {
        return Err(Error::Parameter("n_eval and chunk must be positive".into()));
    }
    let classes = mosaic.dense.config().classes;
    let starts: Vec<usize> = (0..opts.n_eval).step_by(opts.chunk).collect();
    let chunks: Vec<Result<Vec<f64>>> = starts
        .par_iter()
        .enumerate()
        .map(|(ci, &start)| {
            let end = (start + opts.chunk).min(opts.n_eval);
            let cls: Vec<usize> = (start..end).map(|i| i % classes).collect();
            let seed = derive_seed(opts.seed, ci as u64);
            let dense = sample_with(
                |_| Ok((0, &mosaic.dense)),
                schedule,
                opts.sampler,
                &cls,
                mosaic.dense.config().pixels(),
                opts.cfg_scale,
                seed,
                false,
            )?;
            let mixed = mosaic_sample(mosaic, schedule, opts.sampler, &cls, opts.cfg_scale, seed)?;
            Ok(per_sample_distance(&mixed, &dense))
        })
        .collect();
    let mut divergences = Vec::with_capacity(opts.n_eval);
    for c in chunks {
        divergences.extend(c?);
    }
    let divergence = divergences.iter().sum::<f64>() / divergences.len() as f64;
    let mut stage_losses = [0.0; NUM_STAGES];
    let mut realized_sparsities = [0.0; NUM_STAGES];
    for s in 0..NUM_STAGES {
        let (lo, hi) = mosaic.plan.stage_range(s);
        stage_losses[s] = denoising_loss(&mosaic.stages[s], held_out, schedule, lo..=hi, derive_seed(opts.seed, 1000 + s as u64))?;
        realized_sparsities[s] = realized_sparsity(&mosaic.stages[s]);
    }
    let steps = match opts.sampler {
        Sampler::Ddim { steps } => steps,
        Sampler::Ddpm => schedule.horizon(),
    };
    Ok(EvalReport {
        label: label.to_string(),
        divergences,
        divergence,
        stage_losses,
        macs: mosaic_mac_count(mosaic, steps)?,
        dense_macs: mac_count(&mosaic.dense, steps),
        realized_sparsities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleFamily;
    use crate::toydiffusion::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Denoiser, ToyDataset, NoiseSchedule) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = Denoiser::init(ModelConfig::default(), &mut rng).unwrap();
        (model, ToyDataset::generate(64, 8, 0, None).unwrap(), NoiseSchedule::with_defaults(ScheduleFamily::Linear))
    }

    #[test]
    fn dense_forward_macs() {
        let (m, _, _) = setup();
        // patch 4096 + time 8192 + head 4096 + 4 × (196608 + 32768 + 65536 + 2 × 262144)
        assert_eq!(forward_macs(&m), 3_293_184);
        assert_eq!(mac_count(&m, 20), 20 * 3_293_184);
    }

    #[test]
    fn divide_defaults_give_three_stages() {
        let (plan, curve) = run_divide(&NoiseSchedule::with_defaults(ScheduleFamily::Linear), &DivideOptions::default()).unwrap();
        let (d1, d2) = plan.dividers;
        assert!(1000 > d1 && d1 > d2 && d2 >= 1);
        assert_eq!(plan.sparsities, [0.0; 3]);
        assert_eq!(curve.len(), 999);
    }

    #[test]
    fn zero_plan_keeps_dense_and_samples_identically() {
        let (m, data, s) = setup();
        let plan = StagePlan::new(1000, (578, 108)).unwrap();
        let opts = PruneOptions { n_calib: 8, parallel: false, ..PruneOptions::default() };
        let (mosaic, reports) = run_prune(&m, &plan, &data, &s, &opts).unwrap();
        assert!(mosaic.stages.iter().all(|st| st == &m));
        assert!(reports.iter().all(|r| r.layers.is_empty()));
        let sampler = Sampler::Ddim { steps: 20 };
        let a = mosaic_sample(&mosaic, &s, sampler, &[0, 1], 1.0, 5).unwrap();
        let b = crate::toydiffusion::sample(&m, &s, sampler, &[0, 1], 1.0, 5).unwrap();
        assert_eq!(a.samples, b);
    }

    #[test]
    fn isolated_stage_pruning() {
        let (m, data, s) = setup();
        let plan = StagePlan::new(1000, (578, 108)).unwrap().with_sparsities([0.5, 0.0, 0.0]).unwrap();
        let opts = PruneOptions { n_calib: 8, parallel: false, ..PruneOptions::default() };
        let (mosaic, _) = run_prune(&m, &plan, &data, &s, &opts).unwrap();
        assert_ne!(mosaic.stages[0], m);
        assert_eq!(mosaic.stages[1], m);
        assert_eq!(mosaic.stages[2], m);
        for b in 0..4 {
            assert_eq!(mosaic.stages[0].active_heads(b), 2);
            assert_eq!(mosaic.stages[0].active_neurons(b), 128);
        }
    }

    #[test]
    fn dispatch_follows_plan() {
        let (m, _, s) = setup();
        let plan = StagePlan::new(1000, (578, 108)).unwrap();
        let mosaic = MosaicModel::all_dense(m, plan);
        let out = mosaic_sample(&mosaic, &s, Sampler::Ddim { steps: 20 }, &[0], 1.0, 1).unwrap();
        for (t, stage) in out.dispatch {
            let expected = if t > 578 { 0 } else if t > 108 { 1 } else { 2 };
            assert_eq!(stage, expected, "t = {t}");
        }
    }

    #[test]
    fn identical_mosaic_has_zero_divergence() {
        let (m, data, s) = setup();
        let mosaic = MosaicModel::all_dense(m, StagePlan::new(1000, (578, 108)).unwrap());
        let opts = EvalOptions { n_eval: 6, chunk: 4, sampler: Sampler::Ddim { steps: 5 }, ..EvalOptions::default() };
        let r = evaluate(&mosaic, "dense", &data, &s, &opts).unwrap();
        assert_eq!(r.divergence, 0.0);
        assert_eq!(r.divergences.len(), 6);
        assert_eq!(r.macs, r.dense_macs);
        assert_eq!(r.realized_sparsities, [0.0; 3]);
        let mut buf = Vec::new();
        EvalReport::write_csv(&[r], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().starts_with("dense,0.0,"));
    }

    #[test]
    fn mosaic_round_trips_through_disk() {
        let (m, _, _) = setup();
        let mosaic = MosaicModel::all_dense(m.clone(), StagePlan::uniform(1000, (578, 108), 0.2).unwrap());
        let dir = tempfile::tempdir().unwrap();
        mosaic.save(dir.path(), &BTreeMap::new()).unwrap();
        assert_eq!(MosaicModel::load(dir.path(), m).unwrap(), mosaic);
    }

    #[test]
    fn seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 100);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }
}
