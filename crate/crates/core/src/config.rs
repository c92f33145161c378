//! Flat `key=value` run configuration.
//!
//! Files hold one `key=value` per line; `#` starts a comment. Command-line
//! overrides use the same keys as `--key value` (dashes and underscores are
//! interchangeable).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{DivideOptions, EvalOptions, PruneOptions};
use crate::pruner::DEFAULT_DAMPING;
use crate::schedule::{GradUnit, NoiseSchedule, PowerAssumption, ScheduleFamily, DEFAULT_HORIZON};
use crate::toydiffusion::{ModelConfig, Sampler, TrainConfig};
use crate::trajectory::{Weighting, DEFAULT_MAX_SPARSITY};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schedule: ScheduleFamily,
    pub horizon: usize,
    /// Defaults to the family's range when absent.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub lambda: f64,
    pub threshold_fraction: f64,
    pub grad_unit: GradUnit,
    pub signal_power: f64,
    /// External score curve (`t,score` CSV) analyzed instead of the schedule's.
    pub curve_file: Option<PathBuf>,
    pub aggregate: f64,
    pub preset: Option<String>,
    pub weighting: Weighting,
    pub max_sparsity: f64,
    pub model: ModelConfig,
    pub dataset_size: usize,
    pub held_out_size: usize,
    pub train: TrainConfig,
    pub n_calib: usize,
    pub cfg_calibration: bool,
    pub damping: f64,
    pub sampler: Sampler,
    pub cfg_scale: f32,
    pub n_samples: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleFamily::Linear,
            horizon: DEFAULT_HORIZON,
            beta_start: None,
            beta_end: None,
            lambda: 0.01,
            threshold_fraction: 0.55,
            grad_unit: GradUnit::default(),
            signal_power: 1.0,
            curve_file: None,
            aggregate: 0.3,
            preset: None,
            weighting: Weighting::StepWeighted { steps: 20 },
            max_sparsity: DEFAULT_MAX_SPARSITY,
            model: ModelConfig::default(),
            dataset_size: 2048,
            held_out_size: 512,
            train: TrainConfig::default(),
            n_calib: 1024,
            cfg_calibration: true,
            damping: DEFAULT_DAMPING,
            sampler: Sampler::Ddim { steps: 20 },
            cfg_scale: 1.0,
            n_samples: 16,
            n_eval: 256,
            seed: 0,
            out_dir: PathBuf::from("out"),
            workers: 1,
        }
    }
}

/// Every recognized key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "schedule",
    "horizon",
    "beta_start",
    "beta_end",
    "lambda",
    "M",
    "grad_unit",
    "signal_power",
    "curve_file",
    "aggregate",
    "preset",
    "weighting",
    "max_sparsity",
    "image_size",
    "patch",
    "d_model",
    "heads",
    "blocks",
    "mlp_ratio",
    "classes",
    "dataset_size",
    "held_out_size",
    "epochs",
    "batch_size",
    "learning_rate",
    "cond_dropout",
    "grad_clip",
    "n_calib",
    "cfg_calibration",
    "damping",
    "sampler",
    "cfg_scale",
    "n_samples",
    "n_eval",
    "seed",
    "out_dir",
    "workers",
];

fn normalize_key(key: &str) -> String {
    let k = key.trim().replace('-', "_");
    match k.as_str() {
        "m" | "threshold" | "threshold_fraction" => "M".to_string(),
        _ => k,
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn optional(value: &str) -> Option<&str> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then_some(v)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        let k = key.as_str();
        match k {
            "schedule" => self.schedule = value.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "horizon" => self.horizon = parse(k, value)?,
            "beta_start" => self.beta_start = optional(value).map(|v| parse(k, v)).transpose()?,
            "beta_end" => self.beta_end = optional(value).map(|v| parse(k, v)).transpose()?,
            "lambda" => self.lambda = parse(k, value)?,
            "M" => self.threshold_fraction = parse(k, value)?,
            "grad_unit" => self.grad_unit = value.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "signal_power" => self.signal_power = parse(k, value)?,
            "curve_file" => self.curve_file = optional(value).map(PathBuf::from),
            "aggregate" => self.aggregate = parse(k, value)?,
            "preset" => self.preset = optional(value).map(str::to_string),
            "weighting" => self.weighting = value.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "max_sparsity" => self.max_sparsity = parse(k, value)?,
            "image_size" => self.model.image_size = parse(k, value)?,
            "patch" => self.model.patch = parse(k, value)?,
            "d_model" => self.model.d_model = parse(k, value)?,
            "heads" => self.model.heads = parse(k, value)?,
            "blocks" => self.model.blocks = parse(k, value)?,
            "mlp_ratio" => self.model.mlp_ratio = parse(k, value)?,
            "classes" => self.model.classes = parse(k, value)?,
            "dataset_size" => self.dataset_size = parse(k, value)?,
            "held_out_size" => self.held_out_size = parse(k, value)?,
            "epochs" => self.train.epochs = parse(k, value)?,
            "batch_size" => self.train.batch_size = parse(k, value)?,
            "learning_rate" => self.train.learning_rate = parse(k, value)?,
            "cond_dropout" => self.train.cond_dropout = parse(k, value)?,
            "grad_clip" => self.train.grad_clip = parse(k, value)?,
            "n_calib" => self.n_calib = parse(k, value)?,
            "cfg_calibration" => self.cfg_calibration = parse_bool(k, value)?,
            "damping" => self.damping = parse(k, value)?,
            "sampler" => self.sampler = value.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "cfg_scale" => self.cfg_scale = parse(k, value)?,
            "n_samples" => self.n_samples = parse(k, value)?,
            "n_eval" => self.n_eval = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            "workers" => self.workers = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let opt_f = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        let key = normalize_key(key);
        Ok(match key.as_str() {
            "schedule" => self.schedule.to_string(),
            "horizon" => self.horizon.to_string(),
            "beta_start" => opt_f(self.beta_start),
            "beta_end" => opt_f(self.beta_end),
            "lambda" => format!("{:?}", self.lambda),
            "M" => format!("{:?}", self.threshold_fraction),
            "grad_unit" => self.grad_unit.to_string(),
            "signal_power" => format!("{:?}", self.signal_power),
            "curve_file" => self.curve_file.as_ref().map_or("none".into(), |p| p.display().to_string()),
            "aggregate" => format!("{:?}", self.aggregate),
            "preset" => self.preset.clone().unwrap_or_else(|| "none".into()),
            "weighting" => self.weighting.to_string(),
            "max_sparsity" => format!("{:?}", self.max_sparsity),
            "image_size" => self.model.image_size.to_string(),
            "patch" => self.model.patch.to_string(),
            "d_model" => self.model.d_model.to_string(),
            "heads" => self.model.heads.to_string(),
            "blocks" => self.model.blocks.to_string(),
            "mlp_ratio" => self.model.mlp_ratio.to_string(),
            "classes" => self.model.classes.to_string(),
            "dataset_size" => self.dataset_size.to_string(),
            "held_out_size" => self.held_out_size.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => format!("{:?}", self.train.learning_rate),
            "cond_dropout" => format!("{:?}", self.train.cond_dropout),
            "grad_clip" => format!("{:?}", self.train.grad_clip),
            "n_calib" => self.n_calib.to_string(),
            "cfg_calibration" => self.cfg_calibration.to_string(),
            "damping" => format!("{:?}", self.damping),
            "sampler" => self.sampler.to_string(),
            "cfg_scale" => format!("{:?}", self.cfg_scale),
            "n_samples" => self.n_samples.to_string(),
            "n_eval" => self.n_eval.to_string(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "workers" => self.workers.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Applies `--key value` pairs.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key, got {flag:?}")))?;
            if let Some((k, v)) = key.split_once('=') {
                self.set(k, v)?;
                continue;
            }
            let value = it.next().ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.noise_schedule()?;
        self.model.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            return Err(Error::Config(format!("M = {} must lie in (0, 1)", self.threshold_fraction)));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        PowerAssumption::new(self.signal_power).map_err(cfg_err)?;
        if !(0.0..1.0).contains(&self.aggregate) {
            return Err(Error::Config(format!("aggregate {} must lie in [0, 1)", self.aggregate)));
        }
        if !(self.max_sparsity > 0.0 && self.max_sparsity < 1.0) {
            return Err(Error::Config(format!("max_sparsity {} must lie in (0, 1)", self.max_sparsity)));
        }
        if let Some(p) = &self.preset {
            crate::trajectory::lookup_preset(p).map_err(cfg_err)?;
        }
        if let Weighting::StepWeighted { steps: 0 } = self.weighting {
            return Err(Error::Config("step-weighted aggregate needs a positive step count".into()));
        }
        if let Sampler::Ddim { steps } = self.sampler {
            if steps == 0 || steps > self.horizon {
                return Err(Error::Config(format!("DDIM steps {steps} must lie in [1, {}]", self.horizon)));
            }
        }
        let positive = [
            ("dataset_size", self.dataset_size),
            ("held_out_size", self.held_out_size),
            ("n_calib", self.n_calib),
            ("n_samples", self.n_samples),
            ("n_eval", self.n_eval),
            ("workers", self.workers),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::Config(format!("damping {} must be non-negative", self.damping)));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let (bs, be) = self.schedule.default_betas();
        NoiseSchedule::new(
            self.schedule,
            self.horizon,
            self.beta_start.unwrap_or(bs),
            self.beta_end.unwrap_or(be),
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn divide_options(&self) -> Result<DivideOptions> {
        Ok(DivideOptions {
            lambda: self.lambda,
            threshold_fraction: self.threshold_fraction,
            powers: PowerAssumption::new(self.signal_power)?,
            unit: self.grad_unit,
            target_aggregate: self.aggregate,
            weighting: self.weighting,
            max_sparsity: self.max_sparsity,
        })
    }

    pub fn prune_options(&self) -> PruneOptions {
        PruneOptions {
            n_calib: self.n_calib,
            cfg_enabled: self.cfg_calibration,
            damping: self.damping,
            seed: self.seed,
            parallel: self.workers > 1,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { n_eval: self.n_eval, sampler: self.sampler, cfg_scale: self.cfg_scale, seed: self.seed, ..EvalOptions::default() }
    }
}
