//! Subcommand implementations behind the `stageprune` binary.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error or missing
//! checkpoint, 3 degenerate score curve, 4 training divergence, 5 numerical
//! failure while pruning.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{derive_seed, evaluate, mosaic_sample, run_divide, run_prune, EvalReport, MosaicModel, StageReport};
use crate::schedule::ScoreCurve;
use crate::toydiffusion::{
    denoising_loss, sample_with, train, write_loss_csv, Checkpoint, Denoiser, Normalization, ToyDataset,
};
use crate::trajectory::{allocate_sparsity, divide_stages, lookup_preset, StagePlan, NUM_STAGES};

/// Seed streams derived from the master seed.
pub mod streams {
    pub const TRAIN_DATA: u64 = 1;
    pub const HELD_OUT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAINING: u64 = 4;
    pub const CALIBRATION: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const EVALUATION: u64 = 7;
}

pub const DENSE_CHECKPOINT: &str = "dense.ckpt";
pub const MOSAIC_DIR: &str = "mosaic";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownPreset(_) => 2,
        Error::DegenerateCurve(_) | Error::AmbiguousCrossing(_) => 3,
        Error::TrainingDiverged { .. } => 4,
        Error::Numerical(_) | Error::AllHeadsPruned { .. } => 5,
        _ => 1,
    }
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.join(name))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Config(format!("missing checkpoint {}", path.display())));
    }
    Checkpoint::load(path)
}

fn load_mosaic(dir: &Path, dense: Denoiser) -> Result<MosaicModel> {
    if !dir.join("plan.txt").is_file() {
        return Err(Error::Config(format!("missing mosaic checkpoint directory {}", dir.display())));
    }
    for i in 0..NUM_STAGES {
        let p = dir.join(format!("stage{i}.ckpt"));
        if !p.is_file() {
            return Err(Error::Config(format!("missing checkpoint {}", p.display())));
        }
    }
    MosaicModel::load(dir, dense)
}

/// Reads a `t,score` table (extra columns ignored; header required).
pub fn read_score_csv(path: &Path) -> Result<ScoreCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Config("empty curve file".into()))?.split(',').map(str::trim).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Config(format!("curve file lacks a {name} column")))
    };
    let (tc, sc) = (col("t")?, col("score")?);
    let (mut ts, mut scores) = (Vec::new(), Vec::new());
    for line in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("bad curve row {line:?}"));
        let score: f64 = f.get(sc).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if score.is_nan() {
            continue;
        }
        ts.push(f.get(tc).ok_or_else(bad)?.parse::<usize>().map_err(|_| bad())?);
        scores.push(score);
    }
    ScoreCurve::from_scores(ts, scores).map_err(|e| Error::Config(e.to_string()))
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<StagePlan> {
    cfg.validate()?;
    let schedule = cfg.noise_schedule()?;
    let opts = cfg.divide_options()?;
    let plan = match &cfg.curve_file {
        None => {
            let (plan, curve) = run_divide(&schedule, &opts)?;
            let f = fs::File::create(out_file(cfg, "curves.csv")?)?;
            schedule.write_curves_csv(&curve, opts.powers, BufWriter::new(f))?;
            plan
        }
        Some(path) => {
            let curve = read_score_csv(path)?;
            let horizon = curve.timesteps.last().copied().unwrap_or(0);
            let dividers = divide_stages(&curve, opts.threshold_fraction)?;
            let mut plan = StagePlan::new(horizon, dividers)?;
            plan.threshold_fraction = Some(opts.threshold_fraction);
            plan.lambda = None;
            let plan = allocate_sparsity(&plan, &curve, opts.target_aggregate, opts.weighting, opts.max_sparsity)?;
            let mut text = String::from("t,score\n");
            for (t, s) in curve.timesteps.iter().zip(&curve.score) {
                text.push_str(&format!("{t},{s:?}\n"));
            }
            fs::write(out_file(cfg, "curves.csv")?, text)?;
            plan
        }
    };
    fs::write(out_file(cfg, "plan.txt")?, plan.to_text())?;
    Ok(plan)
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub held_out_before: f64,
    pub held_out_after: f64,
}

fn datasets(cfg: &RunConfig, normalization: Option<Normalization>) -> Result<(ToyDataset, ToyDataset)> {
    let train = ToyDataset::generate(cfg.dataset_size, cfg.model.image_size, derive_seed(cfg.seed, streams::TRAIN_DATA), normalization)?;
    let held = ToyDataset::generate(
        cfg.held_out_size,
        cfg.model.image_size,
        derive_seed(cfg.seed, streams::HELD_OUT),
        Some(train.normalization),
    )?;
    Ok((train, held))
}

fn normalization_meta(n: Normalization) -> BTreeMap<String, String> {
    BTreeMap::from([("norm_mean".to_string(), format!("{:?}", n.mean)), ("norm_std".to_string(), format!("{:?}", n.std))])
}

fn normalization_from(meta: &BTreeMap<String, String>) -> Result<Option<Normalization>> {
    match (meta.get("norm_mean"), meta.get("norm_std")) {
        (Some(m), Some(s)) => {
            let bad = || Error::Checkpoint("bad normalization metadata".into());
            Ok(Some(Normalization { mean: m.parse().map_err(|_| bad())?, std: s.parse().map_err(|_| bad())? }))
        }
        _ => Ok(None),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = cfg.noise_schedule()?;
    let (data, held) = datasets(cfg, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::INIT));
    let mut model = Denoiser::init(cfg.model, &mut rng)?;
    let full = 1..=schedule.horizon();
    let loss_seed = derive_seed(cfg.seed, streams::EVALUATION);
    let held_out_before = denoising_loss(&model, &held, &schedule, full.clone(), loss_seed)?;
    let tc = crate::toydiffusion::TrainConfig { seed: derive_seed(cfg.seed, streams::TRAINING), ..cfg.train };
    let log = train(&mut model, &data, &schedule, &tc)?;
    let held_out_after = denoising_loss(&model, &held, &schedule, full, loss_seed)?;
    write_loss_csv(&log, BufWriter::new(fs::File::create(out_file(cfg, "loss.csv")?)?))?;
    let checkpoint = out_file(cfg, DENSE_CHECKPOINT)?;
    Checkpoint { model, meta: normalization_meta(data.normalization) }.save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        final_loss: log.last().map_or(f64::NAN, |e| e.mean_loss),
        held_out_before,
        held_out_after,
    })
}

/// Plan for `prune`: an explicit plan file, a named preset row, or the
/// schedule-derived plan at the configured aggregate.
pub fn prune_plan(cfg: &RunConfig, plan_file: Option<&Path>) -> Result<StagePlan> {
    if let Some(p) = plan_file {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        return StagePlan::from_text(&text).map_err(|e| Error::Config(e.to_string()));
    }
    if let Some(name) = &cfg.preset {
        return lookup_preset(name)?.to_plan(cfg.horizon, cfg.threshold_fraction);
    }
    Ok(run_divide(&cfg.noise_schedule()?, &cfg.divide_options()?)?.0)
}

fn write_traces(dir: &Path, reports: &[StageReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in reports {
        for l in &r.layers {
            let f = fs::File::create(dir.join(format!("stage{}_{}.csv", r.stage, l.layer)))?;
            l.result.write_trace_csv(BufWriter::new(f))?;
        }
    }
    Ok(())
}

pub fn cmd_prune(cfg: &RunConfig, checkpoint: &Path, plan_file: Option<&Path>) -> Result<(MosaicModel, Vec<StageReport>)> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.model.config() != &cfg.model {
        return Err(Error::Config("checkpoint architecture differs from the configured model".into()));
    }
    let schedule = cfg.noise_schedule()?;
    let plan = prune_plan(cfg, plan_file)?;
    let (data, _) = datasets(cfg, normalization_from(&ck.meta)?)?;
    let mut opts = cfg.prune_options();
    opts.seed = derive_seed(cfg.seed, streams::CALIBRATION);
    let (mosaic, reports) = run_prune(&ck.model, &plan, &data, &schedule, &opts)?;
    mosaic.save(&cfg.out_dir.join(MOSAIC_DIR), &ck.meta)?;
    write_traces(&cfg.out_dir.join("traces"), &reports)?;
    Ok((mosaic, reports))
}

pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, mosaic_dir: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    let schedule = cfg.noise_schedule()?;
    let classes: Vec<usize> = (0..cfg.n_samples).map(|i| i % ck.model.config().classes).collect();
    let seed = derive_seed(cfg.seed, streams::SAMPLING);
    let out = match mosaic_dir {
        Some(dir) => mosaic_sample(&load_mosaic(dir, ck.model)?, &schedule, cfg.sampler, &classes, cfg.cfg_scale, seed)?,
        None => sample_with(
            |_| Ok((0, &ck.model)),
            &schedule,
            cfg.sampler,
            &classes,
            ck.model.config().pixels(),
            cfg.cfg_scale,
            seed,
            false,
        )?,
    };
    let mut text = String::from("index,class");
    for p in 0..out.samples.ncols() {
        text.push_str(&format!(",p{p}"));
    }
    text.push('\n');
    for (i, row) in out.samples.rows().into_iter().enumerate() {
        text.push_str(&format!("{i},{}", classes[i]));
        for v in row {
            text.push_str(&format!(",{v:?}"));
        }
        text.push('\n');
    }
    let path = out_file(cfg, "samples.csv")?;
    fs::write(&path, text)?;
    Ok(path)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, mosaic_dir: Option<&Path>, baseline: Option<&str>) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    let schedule = cfg.noise_schedule()?;
    let (data, held) = datasets(cfg, normalization_from(&ck.meta)?)?;
    let mut eopts = cfg.eval_options();
    eopts.seed = derive_seed(cfg.seed, streams::EVALUATION);
    let (label, mosaic) = match mosaic_dir {
        Some(dir) => ("mosaic", load_mosaic(dir, ck.model.clone())?),
        None => {
            let plan = run_divide(&schedule, &cfg.divide_options()?)
                .map(|(p, _)| p)
                .or_else(|_| StagePlan::new(schedule.horizon(), (schedule.horizon() - 1, 1)))?;
            ("dense", MosaicModel::all_dense(ck.model.clone(), plan.with_sparsities([0.0; NUM_STAGES])?))
        }
    };
    let mut reports = vec![evaluate(&mosaic, label, &held, &schedule, &eopts)?];
    match baseline {
        None => {}
        Some("uniform") => {
            let aggregate = mosaic.plan.aggregate()?;
            let plan = StagePlan::uniform(mosaic.plan.horizon, mosaic.plan.dividers, aggregate)?;
            let mut opts = cfg.prune_options();
            opts.seed = derive_seed(cfg.seed, streams::CALIBRATION);
            let (uniform, _) = run_prune(&ck.model, &plan, &data, &schedule, &opts)?;
            reports.push(evaluate(&uniform, "uniform", &held, &schedule, &eopts)?);
        }
        Some(other) => return Err(Error::Config(format!("unknown baseline {other:?} (expected uniform)"))),
    }
    EvalReport::write_csv(&reports, BufWriter::new(fs::File::create(out_file(cfg, "report.csv")?)?))?;
    let text: String = reports.iter().map(|r| r.to_text() + "\n").collect();
    fs::write(out_file(cfg, "report.txt")?, text)?;
    Ok(reports)
}
