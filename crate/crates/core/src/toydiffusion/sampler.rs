//! Forward noising and the DDPM / DDIM reverse updates.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{stack, Denoiser};
use crate::error::{shape_err, Error, Result};
use crate::schedule::{sampling_timesteps, NoiseSchedule};

/// `x_t = √ᾱ_t x_0 + √(1 − ᾱ_t) ε`, with one timestep per row.
pub fn forward_noise(x0: ArrayView2<f32>, t: &[usize], eps: ArrayView2<f32>, schedule: &NoiseSchedule) -> Result<Array2<f32>> {
    if x0.dim() != eps.dim() {
        return Err(shape_err(format!("{:?}", x0.dim()), format!("{:?}", eps.dim())));
    }
    if t.len() != x0.nrows() {
        return Err(shape_err(format!("{} timesteps", x0.nrows()), t.len()));
    }
    let mut out = Array2::zeros(x0.raw_dim());
    for (r, &tt) in t.iter().enumerate() {
        schedule.check(tt)?;
        let ab = schedule.alpha_bar(tt)?;
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        Zip::from(out.row_mut(r))
            .and(x0.row(r))
            .and(eps.row(r))
            .for_each(|o, &x, &e| *o = a * x + b * e);
    }
    Ok(out)
}

pub(crate) fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Noise prediction with classifier-free guidance. At `cfg_scale == 1` the
/// conditional prediction is returned directly; otherwise the batch is doubled
/// with null-class copies and `ε_u + w (ε_c − ε_u)` is returned.
pub fn guided_eps(model: &Denoiser, x: ArrayView2<f32>, t: usize, classes: &[usize], cfg_scale: f32) -> Result<Array2<f32>> {
    let n = x.nrows();
    if cfg_scale == 1.0 {
        return model.forward(x, &vec![t; n], classes);
    }
    let doubled = stack(x, x);
    let mut cls = classes.to_vec();
    cls.extend(std::iter::repeat_n(model.config().null_class(), n));
    let out = model.forward(doubled.view(), &vec![t; 2 * n], &cls)?;
    let (cond, uncond) = (out.slice(s![..n, ..]), out.slice(s![n.., ..]));
    Ok(Zip::from(&cond).and(&uncond).map_collect(|&c, &u| u + cfg_scale * (c - u)))
}

/// One ancestral step `t → t−1` given a noise prediction. `σ_t² = β_t`; no
/// noise is added at `t = 1`.
pub fn ddpm_update(x_t: ArrayView2<f32>, eps: ArrayView2<f32>, t: usize, schedule: &NoiseSchedule, z: ArrayView2<f32>) -> Result<Array2<f32>> {
    schedule.check(t)?;
    if x_t.dim() != eps.dim() || x_t.dim() != z.dim() {
        return Err(shape_err(format!("{:?}", x_t.dim()), format!("{:?} / {:?}", eps.dim(), z.dim())));
    }
    let alpha = schedule.alpha(t)?;
    let beta = schedule.beta(t)?;
    let ab = schedule.alpha_bar(t)?;
    let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
    let eps_coef = (beta / (1.0 - ab).sqrt()) as f32;
    let sigma = if t > 1 { beta.sqrt() as f32 } else { 0.0 };
    Ok(Zip::from(&x_t)
        .and(&eps)
        .and(&z)
        .map_collect(|&x, &e, &zz| inv_sqrt_alpha * (x - eps_coef * e) + sigma * zz))
}

/// Deterministic (η = 0) step `t → t_prev`.
pub fn ddim_update(x_t: ArrayView2<f32>, eps: ArrayView2<f32>, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Array2<f32>> {
    schedule.check(t)?;
    if t_prev > t {
        return Err(Error::Parameter(format!("DDIM step must not increase t ({t} -> {t_prev})")));
    }
    if x_t.dim() != eps.dim() {
        return Err(shape_err(format!("{:?}", x_t.dim()), format!("{:?}", eps.dim())));
    }
    if t_prev == t {
        return Ok(x_t.to_owned());
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sa_p, sn_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(Zip::from(&x_t).and(&eps).map_collect(|&x, &e| {
        let x0 = (f64::from(x) - sn * f64::from(e)) / sa;
        (sa_p * x0 + sn_p * f64::from(e)) as f32
    }))
}

pub fn ddpm_step(
    model: &Denoiser,
    x_t: ArrayView2<f32>,
    t: usize,
    classes: &[usize],
    cfg_scale: f32,
    schedule: &NoiseSchedule,
    z: ArrayView2<f32>,
) -> Result<Array2<f32>> {
    schedule.check(t)?;
    let eps = guided_eps(model, x_t, t, classes, cfg_scale)?;
    ddpm_update(x_t, eps.view(), t, schedule, z)
}

pub fn ddim_step(
    model: &Denoiser,
    x_t: ArrayView2<f32>,
    t: usize,
    t_prev: usize,
    classes: &[usize],
    cfg_scale: f32,
    schedule: &NoiseSchedule,
) -> Result<Array2<f32>> {
    schedule.check(t)?;
    if t_prev > t {
        return Err(Error::Parameter(format!("DDIM step must not increase t ({t} -> {t_prev})")));
    }
    if t_prev == t {
        return Ok(x_t.to_owned());
    }
    let eps = guided_eps(model, x_t, t, classes, cfg_scale)?;
    ddim_update(x_t, eps.view(), t, t_prev, schedule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Full ancestral chain over every timestep.
    Ddpm,
    /// Deterministic strided chain with `steps` evaluations.
    Ddim { steps: usize },
}

impl Sampler {
    /// `(t, t_prev)` pairs in sampling order.
    pub fn step_pairs(&self, horizon: usize) -> Result<Vec<(usize, usize)>> {
        let ts = match *self {
            Sampler::Ddpm => (1..=horizon).rev().collect(),
            Sampler::Ddim { steps } => sampling_timesteps(horizon, steps)?,
        };
        Ok(ts.iter().enumerate().map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0))).collect())
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::Ddpm => f.write_str("ddpm"),
            Sampler::Ddim { steps } => write!(f, "ddim:{steps}"),
        }
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ddpm" {
            return Ok(Sampler::Ddpm);
        }
        if let Some(n) = s.strip_prefix("ddim:") {
            let steps = n.parse().map_err(|_| Error::Parameter(format!("bad sampler {s:?}")))?;
            return Ok(Sampler::Ddim { steps });
        }
        Err(Error::Parameter(format!("unknown sampler {s:?} (expected ddpm or ddim:<steps>)")))
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub samples: Array2<f32>,
    /// `(t, x_t)` for every visited state, starting at `x_T` and ending at `x_0`
    /// (empty unless recording was requested).
    pub trajectory: Vec<(usize, Array2<f32>)>,
    /// `(t, tag)` per denoiser evaluation, where `tag` is what the selector returned.
    pub dispatch: Vec<(usize, usize)>,
}

/// Runs a reverse chain. `select(t)` returns the network to evaluate at `t`
/// together with a tag that is logged in [`SampleOutput::dispatch`].
///
/// All randomness comes from one generator seeded with `seed`: the initial
/// noise is drawn first, then one noise matrix per DDPM step.
#[allow(clippy::too_many_arguments)]
pub fn sample_with<'m, F>(
    mut select: F,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    classes: &[usize],
    pixels: usize,
    cfg_scale: f32,
    seed: u64,
    record: bool,
) -> Result<SampleOutput>
where
    F: FnMut(usize) -> Result<(usize, &'m Denoiser)>,
{
    let n = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = normal_matrix(n, pixels, &mut rng);
    let mut trajectory = Vec::new();
    let mut dispatch = Vec::new();
    if record {
        trajectory.push((schedule.horizon(), x.clone()));
    }
    for (t, t_prev) in sampler.step_pairs(schedule.horizon())? {
        let (tag, model) = select(t)?;
        dispatch.push((t, tag));
        let eps = guided_eps(model, x.view(), t, classes, cfg_scale)?;
        x = match sampler {
            Sampler::Ddpm => {
                let z = normal_matrix(n, pixels, &mut rng);
                ddpm_update(x.view(), eps.view(), t, schedule, z.view())?
            }
            Sampler::Ddim { .. } => ddim_update(x.view(), eps.view(), t, t_prev, schedule)?,
        };
        if record {
            trajectory.push((t_prev, x.clone()));
        }
    }
    Ok(SampleOutput { samples: x, trajectory, dispatch })
}

/// Samples one batch with a single network.
pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    classes: &[usize],
    cfg_scale: f32,
    seed: u64,
) -> Result<Array2<f32>> {
    let out = sample_with(|_| Ok((0, model)), schedule, sampler, classes, model.config().pixels(), cfg_scale, seed, false)?;
    Ok(out.samples)
}

/// Per-state mean of `(1/d)‖x̂_t − x̂_0‖²` over reverse trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct MseCurve {
    /// State timesteps in sampling order, from `T` down to 0.
    pub timesteps: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Mean per-element power of the final samples.
    pub final_power: f64,
}

impl MseCurve {
    /// `|ΔMSE|` between consecutive states, one entry per sampler step.
    pub fn step_deltas(&self) -> Vec<f64> {
        self.mean.windows(2).map(|w| (w[1] - w[0]).abs()).collect()
    }
}

pub fn empirical_mse_curve(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    n_traj: usize,
    cfg_scale: f32,
    seed: u64,
) -> Result<MseCurve> {
    if n_traj == 0 {
        return Err(Error::Parameter("need at least one trajectory".into()));
    }
    let classes: Vec<usize> = (0..n_traj).map(|i| i % model.config().classes).collect();
    let out = sample_with(|_| Ok((0, model)), schedule, sampler, &classes, model.config().pixels(), cfg_scale, seed, true)?;
    let final_x = &out.samples;
    let d = final_x.ncols() as f64;
    let final_power = final_x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / (d * n_traj as f64);
    let mut curve = MseCurve { timesteps: Vec::new(), mean: Vec::new(), stderr: Vec::new(), final_power };
    for (t, x) in &out.trajectory {
        let per: Vec<f64> = x
            .rows()
            .into_iter()
            .zip(final_x.rows())
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| f64::from(p - q).powi(2)).sum::<f64>() / d)
            .collect();
        let mean = per.iter().sum::<f64>() / n_traj as f64;
        let var = if n_traj > 1 {
            per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_traj - 1) as f64
        } else {
            0.0
        };
        curve.timesteps.push(*t);
        curve.mean.push(mean);
        curve.stderr.push((var / n_traj as f64).sqrt());
    }
    Ok(curve)
}
