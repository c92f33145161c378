//! Noise schedules and the closed-form trajectory analytics built on them.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step and
//! `t = T` is pure noise. `alpha_bar(0)` is defined as 1 so strided samplers
//! can land on the clean endpoint.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Default linear endpoints (pixel-space class-conditional models).
pub const LINEAR_BETAS: (f64, f64) = (1e-4, 0.02);
/// Default scaled-linear endpoints (latent text-to-image models).
pub const SCALED_LINEAR_BETAS: (f64, f64) = (0.00085, 0.012);
pub const DEFAULT_HORIZON: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleFamily {
    Linear,
    ScaledLinear,
}

impl ScheduleFamily {
    pub fn default_betas(self) -> (f64, f64) {
        match self {
            ScheduleFamily::Linear => LINEAR_BETAS,
            ScheduleFamily::ScaledLinear => SCALED_LINEAR_BETAS,
        }
    }
}

impl fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleFamily::Linear => "linear",
            ScheduleFamily::ScaledLinear => "scaled_linear",
        })
    }
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleFamily::Linear),
            "scaled_linear" | "scaled-linear" => Ok(ScheduleFamily::ScaledLinear),
            other => Err(Error::Parameter(format!("unknown schedule family {other:?}"))),
        }
    }
}

/// A discrete variance schedule with its derived cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn linspace(start: f64, end: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = if n > 1 { (end - start) / (n - 1) as f64 } else { 0.0 };
    (0..n).map(move |i| if i + 1 == n && n > 1 { end } else { start + step * i as f64 })
}

impl NoiseSchedule {
    pub fn new(family: ScheduleFamily, horizon: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Parameter("horizon must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = match family {
            ScheduleFamily::Linear => linspace(beta_start, beta_end, horizon).collect(),
            ScheduleFamily::ScaledLinear => linspace(beta_start.sqrt(), beta_end.sqrt(), horizon)
                .map(|b| b * b)
                .collect(),
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        if alpha_bars.last().is_some_and(|&a| a <= 0.0) {
            return Err(Error::Parameter("alpha_bar underflowed to zero".into()));
        }
        Ok(Self { family, beta_start, beta_end, betas, alphas, alpha_bars })
    }

    /// Family defaults with `T = 1000`.
    pub fn with_defaults(family: ScheduleFamily) -> Self {
        let (s, e) = family.default_betas();
        Self::new(family, DEFAULT_HORIZON, s, e).expect("default schedule is valid")
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn horizon(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            Err(Error::Index { t, horizon: self.horizon() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        self.check(t)?;
        Ok(ab / (1.0 - ab))
    }

    /// `ln SNR(t)` evaluated without forming the ratio.
    pub fn log_snr(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        let ab = self.alpha_bars[t - 1];
        Ok(ab.ln() - (-ab).ln_1p())
    }

    /// Per-element expected `‖x_t − x_0‖² / d` under the forward process.
    pub fn expected_mse(&self, t: usize, powers: PowerAssumption) -> Result<f64> {
        self.check(t)?;
        Ok(mse_from_alpha_bar(self.alpha_bars[t - 1], powers))
    }

    /// Per-element expected `MSE(t) − MSE(t−1)`; defined for `t ≥ 2`.
    pub fn expected_grad(&self, t: usize, powers: PowerAssumption) -> Result<f64> {
        self.check(t)?;
        if t == 1 {
            return Err(Error::UndefinedGradient);
        }
        Ok(grad_from_alpha_bars(self.alpha_bars[t - 2], self.alpha_bars[t - 1], powers))
    }

    /// Score curve over `t = 2..=T`.
    pub fn score_curve(&self, lambda: f64, powers: PowerAssumption, unit: GradUnit) -> Result<ScoreCurve> {
        if !(lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
        }
        let scale = unit.scale(self.horizon());
        let mut curve = ScoreCurve {
            timesteps: Vec::with_capacity(self.horizon().saturating_sub(1)),
            grad: Vec::new(),
            log_snr: Vec::new(),
            score: Vec::new(),
            lambda,
            unit,
        };
        for t in 2..=self.horizon() {
            let grad = scale * self.expected_grad(t, powers)?;
            let log_snr = self.log_snr(t)?;
            curve.timesteps.push(t);
            curve.grad.push(grad);
            curve.log_snr.push(log_snr);
            curve.score.push(grad + lambda * log_snr);
        }
        Ok(curve)
    }

    /// Writes `t,grad,log_snr,score,mse,snr`, one row per timestep. `t = 1`
    /// has no gradient, so its `grad` and `score` fields read `NaN`.
    pub fn write_curves_csv<W: Write>(&self, curve: &ScoreCurve, powers: PowerAssumption, mut out: W) -> Result<()> {
        writeln!(out, "t,grad,log_snr,score,mse,snr")?;
        for t in 1..=self.horizon() {
            let (grad, score) = match curve.index_of(t) {
                Some(i) => (curve.grad[i], curve.score[i]),
                None => (f64::NAN, f64::NAN),
            };
            writeln!(
                out,
                "{t},{grad:?},{:?},{score:?},{:?},{:?}",
                self.log_snr(t)?,
                self.expected_mse(t, powers)?,
                self.snr(t)?
            )?;
        }
        Ok(())
    }
}

/// Evaluation timesteps of a `steps`-step strided sampler over horizon `T`,
/// in sampling order: `round((steps − k)·T / steps)` for `k = 0..steps`.
pub fn sampling_timesteps(horizon: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > horizon {
        return Err(Error::Parameter(format!("steps must be in 1..={horizon}, got {steps}")));
    }
    Ok((0..steps)
        .map(|k| (((steps - k) * horizon) as f64 / steps as f64).round() as usize)
        .collect())
}

pub(crate) fn mse_from_alpha_bar(ab: f64, p: PowerAssumption) -> f64 {
    let r = 1.0 - ab.sqrt();
    r * r * p.signal + (1.0 - ab) * p.noise
}

pub(crate) fn grad_from_alpha_bars(prev: f64, cur: f64, p: PowerAssumption) -> f64 {
    let delta = cur - prev;
    (delta + 2.0 * (prev.sqrt() - cur.sqrt())) * p.signal - delta * p.noise
}

/// Per-element signal and noise powers standing in for `‖x̂_0‖²/d` and `‖I‖²/d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerAssumption {
    signal: f64,
    noise: f64,
}

impl Default for PowerAssumption {
    fn default() -> Self {
        Self { signal: 1.0, noise: 1.0 }
    }
}

impl PowerAssumption {
    pub fn new(signal: f64) -> Result<Self> {
        if !(signal > 0.0 && signal.is_finite()) {
            return Err(Error::Parameter(format!("signal power must be > 0, got {signal}")));
        }
        Ok(Self { signal, noise: 1.0 })
    }

    /// Signal power measured as the mean square over a data sample.
    pub fn measured<'a, I: IntoIterator<Item = &'a f32>>(values: I) -> Result<Self> {
        let (sum, n) = values
            .into_iter()
            .fold((0.0f64, 0usize), |(s, n), &v| (s + f64::from(v) * f64::from(v), n + 1));
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Self::new(sum / n as f64)
    }

    pub fn signal(&self) -> f64 {
        self.signal
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }
}

/// Unit in which the gradient term of the score is expressed.
///
/// `PerStep` is the raw first difference `MSE(t) − MSE(t−1)`.
/// `PerUnitTime` is the same difference divided by the step width `1/T` of
/// normalized time `t/T`, which keeps the gradient term on the same footing
/// as `λ ln SNR` regardless of horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradUnit {
    PerStep,
    #[default]
    PerUnitTime,
}

impl GradUnit {
    pub fn scale(self, horizon: usize) -> f64 {
        match self {
            GradUnit::PerStep => 1.0,
            GradUnit::PerUnitTime => horizon as f64,
        }
    }
}

impl fmt::Display for GradUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradUnit::PerStep => "per-step",
            GradUnit::PerUnitTime => "per-unit-time",
        })
    }
}

impl FromStr for GradUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(GradUnit::PerStep),
            "per-unit-time" => Ok(GradUnit::PerUnitTime),
            other => Err(Error::Parameter(format!("unknown grad unit {other:?}"))),
        }
    }
}

/// Importance score `grad(t) + λ ln SNR(t)` sampled on an increasing timestep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCurve {
    pub timesteps: Vec<usize>,
    pub grad: Vec<f64>,
    pub log_snr: Vec<f64>,
    pub score: Vec<f64>,
    pub lambda: f64,
    pub unit: GradUnit,
}

impl ScoreCurve {
    /// A curve built directly from score values (grad and log-SNR set to the
    /// score and zero). Used for synthetic curves.
    pub fn from_scores(timesteps: Vec<usize>, score: Vec<f64>) -> Result<Self> {
        if timesteps.len() != score.len() {
            return Err(crate::error::shape_err(timesteps.len(), score.len()));
        }
        if timesteps.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Parameter("timesteps must be consecutive and increasing".into()));
        }
        Ok(Self {
            log_snr: vec![0.0; score.len()],
            grad: score.clone(),
            timesteps,
            score,
            lambda: 0.0,
            unit: GradUnit::PerStep,
        })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn index_of(&self, t: usize) -> Option<usize> {
        let first = *self.timesteps.first()?;
        let i = t.checked_sub(first)?;
        (i < self.len()).then_some(i)
    }

    /// Mean score over the inclusive timestep range `[lo, hi]` intersected with the curve.
    pub fn mean_over(&self, lo: usize, hi: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .timesteps
            .iter()
            .zip(&self.score)
            .filter(|(t, _)| **t >= lo && **t <= hi)
            .map(|(_, s)| *s)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}
