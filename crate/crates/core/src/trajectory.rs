//! Three-stage division of the reverse trajectory and per-stage sparsity budgets.
//!
//! Stages are indexed 0, 1, 2 in sampling order:
//!
//! * stage 0 covers `(divider1, T]` (early, high noise),
//! * stage 1 covers `(divider2, divider1]` (the above-threshold middle),
//! * stage 2 covers `[1, divider2]` (late refinement).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::schedule::{sampling_timesteps, ScoreCurve};

pub const NUM_STAGES: usize = 3;
/// Largest per-stage sparsity the allocator will assign.
pub const DEFAULT_MAX_SPARSITY: f64 = 0.9;

/// How the three per-stage sparsities combine into one aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Plain mean of the three stage sparsities.
    Uniform,
    /// Mean weighted by how many of a `steps`-step sampler's evaluations fall in each stage.
    StepWeighted { steps: usize },
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weighting::Uniform => f.write_str("uniform"),
            Weighting::StepWeighted { steps } => write!(f, "step-weighted:{steps}"),
        }
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(Weighting::Uniform);
        }
        if let Some(n) = s.strip_prefix("step-weighted:") {
            let steps = n
                .parse()
                .map_err(|_| Error::Parameter(format!("bad step count in weighting {s:?}")))?;
            return Ok(Weighting::StepWeighted { steps });
        }
        Err(Error::Parameter(format!("unknown weighting {s:?}")))
    }
}

/// Stage boundaries plus per-stage budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub horizon: usize,
    /// `(divider1, divider2)` with `divider1 > divider2`.
    pub dividers: (usize, usize),
    /// Mean score per stage; absent for plans taken from a preset table.
    pub mean_scores: Option<[f64; NUM_STAGES]>,
    pub sparsities: [f64; NUM_STAGES],
    /// `M` and `λ` used to place the dividers; absent for hand-made plans.
    pub threshold_fraction: Option<f64>,
    pub lambda: Option<f64>,
    pub target_aggregate: f64,
    pub weighting: Weighting,
}

impl StagePlan {
    /// A plan with the given dividers and all sparsities zero.
    pub fn new(horizon: usize, dividers: (usize, usize)) -> Result<Self> {
        let plan = Self {
            horizon,
            dividers,
            mean_scores: None,
            sparsities: [0.0; NUM_STAGES],
            threshold_fraction: None,
            lambda: None,
            target_aggregate: 0.0,
            weighting: Weighting::Uniform,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Same sparsity everywhere. The dividers only affect dispatch.
    pub fn uniform(horizon: usize, dividers: (usize, usize), sparsity: f64) -> Result<Self> {
        let mut plan = Self::new(horizon, dividers)?;
        plan.sparsities = [sparsity; NUM_STAGES];
        plan.target_aggregate = sparsity;
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_sparsities(mut self, sparsities: [f64; NUM_STAGES]) -> Result<Self> {
        self.sparsities = sparsities;
        self.mean_scores = None;
        self.target_aggregate = self.aggregate()?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (d1, d2) = self.dividers;
        if !(self.horizon > d1 && d1 > d2 && d2 >= 1) {
            return Err(Error::Parameter(format!(
                "dividers ({d1}, {d2}) do not split 1..={} into three non-empty stages",
                self.horizon
            )));
        }
        for s in self.sparsities {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Parameter(format!("stage sparsity {s} outside [0, 1)")));
            }
        }
        if let Some(means) = self.mean_scores {
            for i in 0..NUM_STAGES {
                for j in 0..NUM_STAGES {
                    if means[i] > means[j] && self.sparsities[i] > self.sparsities[j] {
                        return Err(Error::Parameter(format!(
                            "stage {i} has a higher mean score but higher sparsity than stage {j}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Stage index containing timestep `t` (1-based).
    pub fn stage_of(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.horizon {
            return Err(Error::Index { t, horizon: self.horizon });
        }
        let (d1, d2) = self.dividers;
        Ok(if t > d1 {
            0
        } else if t > d2 {
            1
        } else {
            2
        })
    }

    /// Inclusive timestep range `(lo, hi)` of a stage.
    pub fn stage_range(&self, stage: usize) -> (usize, usize) {
        let (d1, d2) = self.dividers;
        match stage {
            0 => (d1 + 1, self.horizon),
            1 => (d2 + 1, d1),
            _ => (1, d2),
        }
    }

    /// Number of sampler evaluations landing in each stage.
    pub fn step_counts(&self, steps: usize) -> Result<[usize; NUM_STAGES]> {
        let mut counts = [0; NUM_STAGES];
        for t in sampling_timesteps(self.horizon, steps)? {
            counts[self.stage_of(t)?] += 1;
        }
        Ok(counts)
    }

    fn stage_weights(&self, weighting: Weighting) -> Result<[f64; NUM_STAGES]> {
        match weighting {
            Weighting::Uniform => Ok([1.0 / NUM_STAGES as f64; NUM_STAGES]),
            Weighting::StepWeighted { steps } => {
                let counts = self.step_counts(steps)?;
                let total: usize = counts.iter().sum();
                Ok(counts.map(|c| c as f64 / total as f64))
            }
        }
    }

    /// Aggregate sparsity under this plan's weighting mode.
    pub fn aggregate(&self) -> Result<f64> {
        let w = self.stage_weights(self.weighting)?;
        Ok(w.iter().zip(&self.sparsities).map(|(w, s)| w * s).sum())
    }

    /// Writes the plan as `key=value` lines.
    pub fn to_text(&self) -> String {
        let f = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let means = match &self.mean_scores {
            Some(m) => f(m),
            None => "none".to_string(),
        };
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        format!(
            "horizon={}\ndividers={},{}\nsparsities={}\nmean_scores={}\nM={}\nlambda={}\naggregate={:?}\nweighting={}\n",
            self.horizon,
            self.dividers.0,
            self.dividers.1,
            f(&self.sparsities),
            means,
            opt(self.threshold_fraction),
            opt(self.lambda),
            self.target_aggregate,
            self.weighting
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut horizon = None;
        let mut dividers = None;
        let mut sparsities = None;
        let mut mean_scores = None;
        let mut m = None;
        let mut lambda = None;
        let mut aggregate = None;
        let mut weighting = None;
        let bad = |k: &str, v: &str| Error::Parameter(format!("bad plan value {k}={v}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("plan line without '=': {line}")))?;
            let floats = || -> Result<Vec<f64>> {
                value.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad(key, value))).collect()
            };
            let optional = || -> Result<Option<f64>> {
                if value == "none" {
                    return Ok(None);
                }
                value.parse::<f64>().map(Some).map_err(|_| bad(key, value))
            };
            let three = || -> Result<[f64; NUM_STAGES]> {
                floats()?.try_into().map_err(|_| bad(key, value))
            };
            match key {
                "horizon" => horizon = Some(value.parse::<usize>().map_err(|_| bad(key, value))?),
                "dividers" => {
                    let (a, b) = value.split_once(',').ok_or_else(|| bad(key, value))?;
                    dividers = Some((
                        a.trim().parse().map_err(|_| bad(key, value))?,
                        b.trim().parse().map_err(|_| bad(key, value))?,
                    ));
                }
                "sparsities" => sparsities = Some(three()?),
                "mean_scores" => {
                    mean_scores = Some(if value == "none" { None } else { Some(three()?) });
                }
                "M" => m = Some(optional()?),
                "lambda" => lambda = Some(optional()?),
                "aggregate" => aggregate = Some(value.parse::<f64>().map_err(|_| bad(key, value))?),
                "weighting" => weighting = Some(value.parse::<Weighting>()?),
                other => return Err(Error::Parameter(format!("unknown plan key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::Parameter(format!("plan is missing {k}"));
        let plan = Self {
            horizon: horizon.ok_or_else(|| missing("horizon"))?,
            dividers: dividers.ok_or_else(|| missing("dividers"))?,
            mean_scores: mean_scores.ok_or_else(|| missing("mean_scores"))?,
            sparsities: sparsities.ok_or_else(|| missing("sparsities"))?,
            threshold_fraction: m.ok_or_else(|| missing("M"))?,
            lambda: lambda.ok_or_else(|| missing("lambda"))?,
            target_aggregate: aggregate.ok_or_else(|| missing("aggregate"))?,
            weighting: weighting.ok_or_else(|| missing("weighting"))?,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Splits a score curve at `M · max(score)`.
///
/// Returns `(divider1, divider2)` where `(divider2, divider1]` is the single
/// contiguous region strictly above the threshold.
pub fn divide_stages(curve: &ScoreCurve, threshold_fraction: f64) -> Result<(usize, usize)> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::Parameter(format!("M must be in (0, 1), got {threshold_fraction}")));
    }
    if curve.len() < 3 {
        return Err(Error::Parameter(format!("curve needs >= 3 points, has {}", curve.len())));
    }
    let max = curve.score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::DegenerateCurve(format!("maximum score {max} admits no crossing")));
    }
    let threshold = threshold_fraction * max;

    let mut regions = Vec::new();
    let mut start = None;
    for (i, s) in curve.score.iter().enumerate() {
        match (*s > threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(lo)) => {
                regions.push((lo, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(lo) = start {
        regions.push((lo, curve.len() - 1));
    }
    let to_t = |(a, b): (usize, usize)| (curve.timesteps[a], curve.timesteps[b]);
    match regions.as_slice() {
        [] => Err(Error::DegenerateCurve("no point exceeds the threshold".into())),
        [(lo, hi)] => {
            if *lo == 0 || *hi == curve.len() - 1 {
                let (a, b) = to_t((*lo, *hi));
                return Err(Error::DegenerateCurve(format!(
                    "above-threshold region [{a}, {b}] touches the end of the curve, so only one crossing exists"
                )));
            }
            Ok((curve.timesteps[*hi], curve.timesteps[*lo] - 1))
        }
        many => Err(Error::AmbiguousCrossing(many.iter().copied().map(to_t).collect())),
    }
}

/// Fills per-stage sparsities for a plan whose dividers are already set.
///
/// Mean stage scores are min-max normalized to `[0, 1]`; stage `i` gets
/// `c · (1 − normalized_i)` clamped to `[0, max_sparsity]`, with `c` solved so
/// the aggregate under `weighting` equals `target`.
pub fn allocate_sparsity(
    plan: &StagePlan,
    curve: &ScoreCurve,
    target: f64,
    weighting: Weighting,
    max_sparsity: f64,
) -> Result<StagePlan> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Parameter(format!("target aggregate {target} outside [0, 1)")));
    }
    if !(max_sparsity > 0.0 && max_sparsity < 1.0) {
        return Err(Error::Parameter(format!("max sparsity {max_sparsity} outside (0, 1)")));
    }
    plan.validate()?;
    let mut means = [0.0; NUM_STAGES];
    for (stage, mean) in means.iter_mut().enumerate() {
        let (lo, hi) = plan.stage_range(stage);
        *mean = curve.mean_over(lo, hi).ok_or_else(|| {
            Error::Parameter(format!("stage {stage} [{lo}, {hi}] has no score points"))
        })?;
    }
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    let shape: [f64; NUM_STAGES] = if spread <= 1e-12 * hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE) {
        [1.0; NUM_STAGES]
    } else {
        means.map(|m| 1.0 - (m - lo) / spread)
    };
    let stage_weights = plan.stage_weights(weighting)?;
    let sparsities = solve_budget(&shape, &stage_weights, target, max_sparsity)?;

    let out = StagePlan {
        mean_scores: Some(means),
        sparsities,
        target_aggregate: target,
        weighting,
        ..plan.clone()
    };
    out.validate()?;
    Ok(out)
}

/// Finds `s_i = min(c · shape_i, cap)` with `Σ w_i s_i = target`.
fn solve_budget(
    shape: &[f64; NUM_STAGES],
    weights: &[f64; NUM_STAGES],
    target: f64,
    cap: f64,
) -> Result<[f64; NUM_STAGES]> {
    if target == 0.0 {
        return Ok([0.0; NUM_STAGES]);
    }
    let reachable: f64 = (0..NUM_STAGES)
        .filter(|&i| shape[i] > 0.0 && weights[i] > 0.0)
        .map(|i| weights[i] * cap)
        .sum();
    if target > reachable * (1.0 + 1e-12) {
        return Err(Error::Infeasible { target, max: reachable });
    }
    let mut clamped = [false; NUM_STAGES];
    loop {
        let fixed: f64 = (0..NUM_STAGES).filter(|&i| clamped[i]).map(|i| weights[i] * cap).sum();
        let free: f64 = (0..NUM_STAGES).filter(|&i| !clamped[i]).map(|i| weights[i] * shape[i]).sum();
        if free <= 0.0 {
            return Err(Error::Infeasible { target, max: reachable });
        }
        let c = (target - fixed) / free;
        let newly: Vec<usize> = (0..NUM_STAGES).filter(|&i| !clamped[i] && c * shape[i] > cap).collect();
        if newly.is_empty() {
            return Ok(std::array::from_fn(|i| if clamped[i] { cap } else { c * shape[i] }));
        }
        for i in newly {
            clamped[i] = true;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelFamily {
    Dit,
    Sdxl,
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Dit => "dit",
            ModelFamily::Sdxl => "sdxl",
        })
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dit" => Ok(ModelFamily::Dit),
            "sdxl" => Ok(ModelFamily::Sdxl),
            _ => Err(Error::UnknownPreset(s.to_string())),
        }
    }
}

/// One published allocation row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationRow {
    pub family: ModelFamily,
    pub aggregate: f64,
    pub sparsities: [f64; NUM_STAGES],
    pub dividers: (usize, usize),
}

impl AllocationRow {
    /// A plan over a `horizon`-step trajectory carrying this row verbatim.
    pub fn to_plan(&self, horizon: usize, threshold_fraction: f64) -> Result<StagePlan> {
        let mut plan = StagePlan::new(horizon, self.dividers)?;
        plan.sparsities = self.sparsities;
        plan.threshold_fraction = Some(threshold_fraction);
        plan.target_aggregate = self.aggregate;
        plan.validate()?;
        Ok(plan)
    }
}

const fn row(family: ModelFamily, aggregate: f64, s: [f64; 3], dividers: (usize, usize)) -> AllocationRow {
    AllocationRow { family, aggregate, sparsities: s, dividers }
}

/// Reference allocations at `M = 0.55` over a 1000-step trajectory. The
/// `aggregate` column is a label; it is not the mean of the stage values.
pub const ALLOCATION_TABLE: &[AllocationRow] = &[
    row(ModelFamily::Dit, 0.25, [0.50, 0.02, 0.06], (900, 450)),
    row(ModelFamily::Dit, 0.30, [0.60, 0.04, 0.10], (900, 450)),
    row(ModelFamily::Dit, 0.35, [0.70, 0.06, 0.20], (900, 450)),
    row(ModelFamily::Dit, 0.40, [0.80, 0.08, 0.30], (900, 450)),
    row(ModelFamily::Dit, 0.45, [0.90, 0.10, 0.40], (900, 450)),
    row(ModelFamily::Dit, 0.50, [0.90, 0.15, 0.40], (900, 450)),
    row(ModelFamily::Sdxl, 0.10, [0.30, 0.03, 0.15], (900, 250)),
    row(ModelFamily::Sdxl, 0.15, [0.40, 0.04, 0.20], (900, 250)),
    row(ModelFamily::Sdxl, 0.20, [0.60, 0.06, 0.30], (900, 250)),
    row(ModelFamily::Sdxl, 0.30, [0.80, 0.08, 0.40], (900, 250)),
];

/// Reported dividers for the DiT stage-division ablation, `(M, divider1, divider2)`.
/// These come from a different run than [`ALLOCATION_TABLE`], whose DiT rows
/// use dividers (900, 450) at the same `M`.
pub const DIVISION_REFERENCE: &[(f64, usize, usize)] = &[(0.45, 600, 50), (0.55, 550, 100), (0.70, 500, 130)];

/// Per-stage sparsity ablation at aggregate label 0.3, dividers (900, 450).
pub const SPARSITY_ABLATIONS: &[(&str, [f64; NUM_STAGES])] = &[
    ("uniform", [0.3, 0.3, 0.3]),
    ("sparser-stage-1", [0.9, 0.04, 0.1]),
    ("sparser-stage-2", [0.6, 0.15, 0.1]),
    ("non-snr-refined", [0.6, 0.04, 0.4]),
    ("trajectory-aware", [0.6, 0.04, 0.1]),
];

pub fn lookup_allocation(family: ModelFamily, aggregate: f64) -> Result<AllocationRow> {
    ALLOCATION_TABLE
        .iter()
        .find(|r| r.family == family && (r.aggregate - aggregate).abs() < 1e-9)
        .copied()
        .ok_or_else(|| Error::UnknownPreset(format!("{family}-{aggregate:.2}")))
}

/// Parses preset names of the form `dit-0.30`.
pub fn lookup_preset(name: &str) -> Result<AllocationRow> {
    let (family, agg) = name.split_once('-').ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
    let family: ModelFamily = family.parse().map_err(|_| Error::UnknownPreset(name.to_string()))?;
    let agg: f64 = agg.parse().map_err(|_| Error::UnknownPreset(name.to_string()))?;
    lookup_allocation(family, agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{GradUnit, NoiseSchedule, PowerAssumption, ScheduleFamily};
    use proptest::prelude::*;

    fn linear_curve(lambda: f64) -> ScoreCurve {
        NoiseSchedule::with_defaults(ScheduleFamily::Linear)
            .score_curve(lambda, PowerAssumption::default(), GradUnit::default())
            .unwrap()
    }

    #[test]
    fn quadratic_curve_splits_at_analytic_roots() {
        let ts: Vec<usize> = (1..=1000).collect();
        let scores = ts.iter().map(|&t| 1e5 - (t as f64 - 500.0).powi(2)).collect();
        let curve = ScoreCurve::from_scores(ts, scores).unwrap();
        // 1e5 - (t-500)^2 = 0.75e5  =>  t = 500 ± sqrt(25000)
        let root = 25000f64.sqrt();
        let (d1, d2) = divide_stages(&curve, 0.75).unwrap();
        assert_eq!(d1, (500.0 + root).floor() as usize);
        assert_eq!(d2, (500.0 - root).floor() as usize);
        assert_eq!((d1, d2), (658, 341));
    }

    #[test]
    fn constant_curve_is_degenerate() {
        let curve = ScoreCurve::from_scores((2..50).collect(), vec![3.0; 48]).unwrap();
        assert!(matches!(divide_stages(&curve, 0.5), Err(Error::DegenerateCurve(_))));
        let neg = ScoreCurve::from_scores((2..50).collect(), vec![-1.0; 48]).unwrap();
        assert!(matches!(divide_stages(&neg, 0.5), Err(Error::DegenerateCurve(_))));
    }

    #[test]
    fn two_humps_are_ambiguous() {
        let ts: Vec<usize> = (1..=100).collect();
        let scores = ts
            .iter()
            .map(|&t| if (20..30).contains(&t) || (60..70).contains(&t) { 1.0 } else { 0.1 })
            .collect();
        let curve = ScoreCurve::from_scores(ts, scores).unwrap();
        match divide_stages(&curve, 0.5) {
            Err(Error::AmbiguousCrossing(r)) => assert_eq!(r, vec![(20, 29), (60, 69)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn region_at_curve_end_is_degenerate() {
        let ts: Vec<usize> = (2..=100).collect();
        let scores = ts.iter().map(|&t| 1.0 / t as f64).collect();
        let curve = ScoreCurve::from_scores(ts, scores).unwrap();
        assert!(matches!(divide_stages(&curve, 0.5), Err(Error::DegenerateCurve(_))));
    }

    #[test]
    fn bad_threshold_fraction() {
        let c = linear_curve(0.01);
        assert!(divide_stages(&c, 0.0).is_err());
        assert!(divide_stages(&c, 1.0).is_err());
    }

    #[test]
    fn linear_defaults_near_reference_dividers() {
        let (d1, d2) = divide_stages(&linear_curve(0.01), 0.55).unwrap();
        assert!(d1.abs_diff(550) <= 60, "{d1}");
        assert!(d2.abs_diff(100) <= 40, "{d2}");
    }

    #[test]
    fn zero_target_gives_zero_sparsity() {
        let c = linear_curve(0.01);
        let plan = StagePlan::new(1000, divide_stages(&c, 0.55).unwrap()).unwrap();
        let out = allocate_sparsity(&plan, &c, 0.0, Weighting::Uniform, 0.9).unwrap();
        assert_eq!(out.sparsities, [0.0; 3]);
    }

    #[test]
    fn equal_means_give_equal_sparsity() {
        let curve = ScoreCurve::from_scores((1..=100).collect(), vec![2.0; 100]).unwrap();
        let plan = StagePlan::new(100, (60, 30)).unwrap();
        for w in [Weighting::Uniform, Weighting::StepWeighted { steps: 10 }] {
            let out = allocate_sparsity(&plan, &curve, 0.3, w, 0.9).unwrap();
            for s in out.sparsities {
                assert!((s - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn computed_allocation_hits_target() {
        let c = linear_curve(0.01);
        let plan = StagePlan::new(1000, divide_stages(&c, 0.55).unwrap()).unwrap();
        for w in [Weighting::Uniform, Weighting::StepWeighted { steps: 20 }] {
            let out = allocate_sparsity(&plan, &c, 0.3, w, 0.9).unwrap();
            assert!((out.aggregate().unwrap() - 0.3).abs() < 1e-9);
            // middle stage has the highest mean score
            let means = out.mean_scores.unwrap();
            assert!(means[1] > means[0] && means[1] > means[2]);
            assert_eq!(out.sparsities[1], 0.0);
        }
    }

    #[test]
    fn clamp_redistributes_and_infeasible_errors() {
        let ts: Vec<usize> = (1..=90).collect();
        let scores = ts.iter().map(|&t| if t <= 30 { 0.5 } else if t <= 60 { 1.0 } else { 0.0 }).collect();
        let curve = ScoreCurve::from_scores(ts, scores).unwrap();
        let plan = StagePlan::new(90, (60, 30)).unwrap();
        // shape = [1, 0, 0.5]; target 0.5 first asks c = 1.0, stage 0 clamps at 0.9,
        // then (0.9 + 0.5 c) / 3 = 0.5 gives c = 1.2 and stage 2 = 0.6
        let out = allocate_sparsity(&plan, &curve, 0.5, Weighting::Uniform, 0.9).unwrap();
        assert!((out.sparsities[0] - 0.9).abs() < 1e-12);
        assert_eq!(out.sparsities[1], 0.0);
        assert!((out.sparsities[2] - 0.6).abs() < 1e-12);
        assert!((out.aggregate().unwrap() - 0.5).abs() < 1e-12);
        // maximum reachable is (0.9 + 0.9) / 3 = 0.6
        assert!(matches!(
            allocate_sparsity(&plan, &curve, 0.65, Weighting::Uniform, 0.9),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn preset_lookups() {
        let r = lookup_allocation(ModelFamily::Dit, 0.50).unwrap();
        assert_eq!(r.sparsities, [0.90, 0.15, 0.40]);
        let r = lookup_allocation(ModelFamily::Sdxl, 0.10).unwrap();
        assert_eq!(r.sparsities, [0.30, 0.03, 0.15]);
        assert_eq!(r.dividers, (900, 250));
        let r = lookup_preset("dit-0.30").unwrap();
        assert_eq!(r.sparsities, [0.60, 0.04, 0.10]);
        assert_eq!(r.dividers, (900, 450));
        assert!(matches!(lookup_allocation(ModelFamily::Dit, 0.99), Err(Error::UnknownPreset(_))));
        assert!(lookup_preset("unet-0.30").is_err());
        for row in ALLOCATION_TABLE {
            row.to_plan(1000, 0.55).unwrap();
        }
    }

    #[test]
    fn stage_dispatch_and_counts() {
        let plan = StagePlan::new(1000, (900, 450)).unwrap();
        assert_eq!(plan.stage_of(1000).unwrap(), 0);
        assert_eq!(plan.stage_of(901).unwrap(), 0);
        assert_eq!(plan.stage_of(900).unwrap(), 1);
        assert_eq!(plan.stage_of(451).unwrap(), 1);
        assert_eq!(plan.stage_of(450).unwrap(), 2);
        assert_eq!(plan.stage_of(1).unwrap(), 2);
        assert!(plan.stage_of(0).is_err());
        assert_eq!(plan.step_counts(20).unwrap(), [2, 9, 9]);
        assert!(StagePlan::new(1000, (450, 900)).is_err());
        assert!(StagePlan::new(1000, (1000, 10)).is_err());
        assert!(StagePlan::new(1000, (10, 0)).is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = linear_curve(0.01);
        let plan = StagePlan::new(1000, divide_stages(&c, 0.55).unwrap()).unwrap();
        let mut out = allocate_sparsity(&plan, &c, 0.3, Weighting::StepWeighted { steps: 20 }, 0.9).unwrap();
        out.threshold_fraction = Some(0.55);
        out.lambda = Some(0.01);
        let text = out.to_text();
        assert_eq!(StagePlan::from_text(&text).unwrap(), out);
        let preset = lookup_preset("sdxl-0.20").unwrap().to_plan(1000, 0.55).unwrap();
        let back = StagePlan::from_text(&preset.to_text()).unwrap();
        assert_eq!(back.to_text(), preset.to_text());
        assert!(StagePlan::from_text("horizon=10\n").is_err());
    }

    proptest! {
        #[test]
        fn division_is_scale_invariant(scale in 1e-6f64..1e6, m in 0.45f64..0.70) {
            let c = linear_curve(0.01);
            let mut scaled = c.clone();
            scaled.score.iter_mut().for_each(|s| *s *= scale);
            prop_assert_eq!(divide_stages(&c, m).unwrap(), divide_stages(&scaled, m).unwrap());
        }

        #[test]
        fn highest_mean_gets_least_sparsity(
            a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0,
            target in 0.0f64..0.25, steps in 3usize..60,
        ) {
            let ts: Vec<usize> = (1..=90).collect();
            let scores = ts.iter().map(|&t| if t <= 30 { c } else if t <= 60 { b } else { a }).collect();
            let curve = ScoreCurve::from_scores(ts, scores).unwrap();
            let plan = StagePlan::new(90, (60, 30)).unwrap();
            for w in [Weighting::Uniform, Weighting::StepWeighted { steps }] {
                let out = match allocate_sparsity(&plan, &curve, target, w, 0.9) {
                    Ok(out) => out,
                    Err(Error::Infeasible { .. }) => continue,
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                };
                let means = out.mean_scores.unwrap();
                let top = (0..3).max_by(|&i, &j| means[i].total_cmp(&means[j])).unwrap();
                for s in out.sparsities {
                    prop_assert!(out.sparsities[top] <= s + 1e-15);
                }
                if out.sparsities.iter().all(|&s| s < 0.9) {
                    prop_assert!((out.aggregate().unwrap() - target).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn single_region_for_linear_defaults(m in 0.45f64..=0.70) {
            prop_assert!(divide_stages(&linear_curve(0.01), m).is_ok());
        }
    }
}
