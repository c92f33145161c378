//! C ABI over `stageprune`.
//!
//! Objects are opaque handles created by `sp_*_new`/`sp_*_load` and released
//! with the matching `sp_*_free`. Every fallible call returns an [`SpStatus`];
//! on failure the message is kept per thread and read back with
//! [`sp_last_error_message`]. Panics are caught at the boundary and reported
//! as [`SpStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stageprune::pipeline::{mosaic_sample, run_divide, DivideOptions, MosaicModel};
use stageprune::pruner::{prune_layer, HessianAccumulator};
use stageprune::schedule::{GradUnit, NoiseSchedule, PowerAssumption, ScheduleFamily};
use stageprune::toydiffusion::{sample, Checkpoint, Denoiser, Sampler};
use stageprune::trajectory::{StagePlan, Weighting, DEFAULT_MAX_SPARSITY, NUM_STAGES};
use stageprune::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    DegenerateCurve = 4,
    AmbiguousCrossing = 5,
    Numerical = 6,
    Io = 7,
    Checkpoint = 8,
    Panic = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpScheduleFamily {
    Linear = 0,
    ScaledLinear = 1,
}

/// Opaque noise schedule.
pub struct SpSchedule(NoiseSchedule);
/// Opaque three-stage plan.
pub struct SpPlan(StagePlan);
/// Opaque dense denoiser.
pub struct SpModel(Denoiser);
/// Opaque set of per-stage denoisers.
pub struct SpMosaic(MosaicModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SpStatus {
    match err {
        Error::Parameter(_)
        | Error::Index { .. }
        | Error::UndefinedGradient
        | Error::Infeasible { .. }
        | Error::UnknownPreset(_)
        | Error::Config(_)
        | Error::EmptyDataset => SpStatus::InvalidArgument,
        Error::Shape { .. } => SpStatus::Shape,
        Error::DegenerateCurve(_) => SpStatus::DegenerateCurve,
        Error::AmbiguousCrossing(_) => SpStatus::AmbiguousCrossing,
        Error::Numerical(_) | Error::AllHeadsPruned { .. } | Error::TrainingDiverged { .. } | Error::Capture(_) => {
            SpStatus::Numerical
        }
        Error::Io(_) => SpStatus::Io,
        Error::Checkpoint(_) => SpStatus::Checkpoint,
        Error::Internal(_) => SpStatus::Internal,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), (SpStatus, String)>>(f: F) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SpStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (SpStatus, String)>;
}

impl<T> IntoFfi<T> for stageprune::Result<T> {
    fn ffi(self) -> Result<T, (SpStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(name: &str) -> (SpStatus, String) {
    (SpStatus::NullPointer, format!("{name} is null"))
}

fn bad(msg: impl Into<String>) -> (SpStatus, String) {
    (SpStatus::InvalidArgument, msg.into())
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, (SpStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (SpStatus, String)> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, (SpStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| bad(format!("{name} is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (SpStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], (SpStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn sampler_of(steps: usize) -> Sampler {
    if steps == 0 {
        Sampler::Ddpm
    } else {
        Sampler::Ddim { steps }
    }
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a schedule. Non-positive `beta_start` and `beta_end` select the
/// family defaults.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_schedule_new(
    family: SpScheduleFamily,
    horizon: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut SpSchedule,
) -> SpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let family = match family {
            SpScheduleFamily::Linear => ScheduleFamily::Linear,
            SpScheduleFamily::ScaledLinear => ScheduleFamily::ScaledLinear,
        };
        let (b0, b1) = if beta_start <= 0.0 && beta_end <= 0.0 { family.default_betas() } else { (beta_start, beta_end) };
        let s = NoiseSchedule::new(family, horizon, b0, b1).ffi()?;
        *out = Box::into_raw(Box::new(SpSchedule(s)));
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`sp_schedule_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sp_schedule_free(s: *mut SpSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// # Safety
/// `s` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_schedule_alpha_bar(s: *const SpSchedule, t: usize, out: *mut f64) -> SpStatus {
    guard(|| {
        let s = deref(s, "schedule")?;
        *out_ref(out, "out")? = s.0.alpha_bar(t).ffi()?;
        Ok(())
    })
}

/// Closed-form expected prediction error at `t` for signal power `signal_power`.
///
/// # Safety
/// `s` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_schedule_expected_mse(
    s: *const SpSchedule,
    t: usize,
    signal_power: f64,
    out: *mut f64,
) -> SpStatus {
    guard(|| {
        let s = deref(s, "schedule")?;
        let p = PowerAssumption::new(signal_power).ffi()?;
        *out_ref(out, "out")? = s.0.expected_mse(t, p).ffi()?;
        Ok(())
    })
}

/// Closed-form expected error change between `t - 1` and `t`, per step.
///
/// # Safety
/// `s` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_schedule_expected_grad(
    s: *const SpSchedule,
    t: usize,
    signal_power: f64,
    out: *mut f64,
) -> SpStatus {
    guard(|| {
        let s = deref(s, "schedule")?;
        let p = PowerAssumption::new(signal_power).ffi()?;
        *out_ref(out, "out")? = s.0.expected_grad(t, p).ffi()?;
        Ok(())
    })
}

/// Divides the trajectory into three stages and allocates `target_aggregate`
/// across them. `weighting_steps == 0` weights stages by timestep count,
/// otherwise by the number of DDIM steps that land in each stage.
///
/// # Safety
/// `s` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_divide(
    s: *const SpSchedule,
    lambda: f64,
    threshold_fraction: f64,
    signal_power: f64,
    target_aggregate: f64,
    weighting_steps: usize,
    out: *mut *mut SpPlan,
) -> SpStatus {
    guard(|| {
        let s = deref(s, "schedule")?;
        let out = out_ref(out, "out")?;
        let opts = DivideOptions {
            lambda,
            threshold_fraction,
            powers: PowerAssumption::new(signal_power).ffi()?,
            unit: GradUnit::default(),
            target_aggregate,
            weighting: if weighting_steps == 0 {
                Weighting::Uniform
            } else {
                Weighting::StepWeighted { steps: weighting_steps }
            },
            max_sparsity: DEFAULT_MAX_SPARSITY,
        };
        let (plan, _) = run_divide(&s.0, &opts).ffi()?;
        *out = Box::into_raw(Box::new(SpPlan(plan)));
        Ok(())
    })
}

/// Parses a plan from its text form.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_from_text(text: *const c_char, out: *mut *mut SpPlan) -> SpStatus {
    guard(|| {
        if text.is_null() {
            return Err(null("text"));
        }
        let out = out_ref(out, "out")?;
        let text = CStr::from_ptr(text).to_str().map_err(|_| bad("text is not UTF-8"))?;
        let plan = StagePlan::from_text(text).ffi()?;
        *out = Box::into_raw(Box::new(SpPlan(plan)));
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_free(p: *mut SpPlan) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_dividers(p: *const SpPlan, d1: *mut usize, d2: *mut usize) -> SpStatus {
    guard(|| {
        let p = deref(p, "plan")?;
        *out_ref(d1, "d1")? = p.0.dividers.0;
        *out_ref(d2, "d2")? = p.0.dividers.1;
        Ok(())
    })
}

/// Writes the three stage sparsities, earliest (noisiest) stage first.
///
/// # Safety
/// `out` must point to three writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_sparsities(p: *const SpPlan, out: *mut f64) -> SpStatus {
    guard(|| {
        let p = deref(p, "plan")?;
        slice_out(out, NUM_STAGES, "out")?.copy_from_slice(&p.0.sparsities);
        Ok(())
    })
}

/// # Safety
/// `p` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_stage_of(p: *const SpPlan, t: usize, out: *mut usize) -> SpStatus {
    guard(|| {
        let p = deref(p, "plan")?;
        *out_ref(out, "out")? = p.0.stage_of(t).ffi()?;
        Ok(())
    })
}

/// Text form of the plan; release with [`sp_string_free`].
///
/// # Safety
/// `p` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_to_text(p: *const SpPlan, out: *mut *mut c_char) -> SpStatus {
    guard(|| {
        let p = deref(p, "plan")?;
        let out = out_ref(out, "out")?;
        *out = CString::new(p.0.to_text()).map_err(|e| (SpStatus::Internal, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Group OBS pruning of one linear layer.
///
/// `weights` is `rows x cols` row-major; `activations` is `samples x cols`
/// row-major and feeds the layer Hessian `XᵀX`. Groups are `group_size`
/// consecutive input columns. On success `out_weights` holds the compensated
/// weights, `out_mask[g]` is 1 for every pruned group and `out_recon_error`
/// the output reconstruction error under the undamped Hessian.
///
/// # Safety
/// Buffers must hold the stated number of elements; `out_mask` holds
/// `cols / group_size` bytes.
#[no_mangle]
pub unsafe extern "C" fn sp_prune_layer(
    weights: *const f64,
    rows: usize,
    cols: usize,
    activations: *const f64,
    samples: usize,
    damping: f64,
    sparsity: f64,
    group_size: usize,
    out_weights: *mut f64,
    out_mask: *mut u8,
    out_recon_error: *mut f64,
) -> SpStatus {
    guard(|| {
        if group_size == 0 || !cols.is_multiple_of(group_size) {
            return Err(bad(format!("group size {group_size} does not divide {cols} columns")));
        }
        let w = slice_arg(weights, rows * cols, "weights")?;
        let x = slice_arg(activations, samples * cols, "activations")?;
        let out_w = slice_out(out_weights, rows * cols, "out_weights")?;
        let out_m = slice_out(out_mask, cols / group_size, "out_mask")?;
        let out_e = out_ref(out_recon_error, "out_recon_error")?;
        let w = nalgebra::DMatrix::from_row_slice(rows, cols, w);
        let mut acc = HessianAccumulator::with_damping(cols, damping).ffi()?;
        acc.accumulate_f64(&nalgebra::DMatrix::from_row_slice(samples, cols, x)).ffi()?;
        let r = prune_layer(&w, &acc, sparsity, group_size).ffi()?;
        for i in 0..rows {
            for j in 0..cols {
                out_w[i * cols + j] = r.weights[(i, j)];
            }
        }
        for (g, m) in out_m.iter_mut().enumerate() {
            *m = u8::from(r.mask.is_pruned(g));
        }
        *out_e = r.recon_error;
        Ok(())
    })
}

/// Loads a dense checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sp_model_load(path: *const c_char, out: *mut *mut SpModel) -> SpStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_ref(out, "out")?;
        let ck = Checkpoint::load(path).ffi()?;
        *out = Box::into_raw(Box::new(SpModel(ck.model)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`sp_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sp_model_free(m: *mut SpModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Values per generated sample.
///
/// # Safety
/// `m` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_model_pixels(m: *const SpModel, out: *mut usize) -> SpStatus {
    guard(|| {
        *out_ref(out, "out")? = deref(m, "model")?.0.config().pixels();
        Ok(())
    })
}

/// Samples `n` images with the dense model. `steps == 0` selects DDPM over
/// every timestep, otherwise DDIM with that many steps.
///
/// # Safety
/// `classes` holds `n` labels and `out` has room for `n * pixels` floats.
#[no_mangle]
pub unsafe extern "C" fn sp_model_sample(
    m: *const SpModel,
    s: *const SpSchedule,
    steps: usize,
    classes: *const usize,
    n: usize,
    cfg_scale: f32,
    seed: u64,
    out: *mut f32,
) -> SpStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let s = deref(s, "schedule")?;
        let classes = slice_arg(classes, n, "classes")?;
        let out = slice_out(out, n * m.0.config().pixels(), "out")?;
        let x = sample(&m.0, &s.0, sampler_of(steps), classes, cfg_scale, seed).ffi()?;
        out.copy_from_slice(x.as_slice().ok_or_else(|| (SpStatus::Internal, "non-contiguous output".into()))?);
        Ok(())
    })
}

/// Loads a per-stage model directory written by `stageprune prune`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `dense` and `out` valid. `dense` is
/// copied and may be freed afterwards.
#[no_mangle]
pub unsafe extern "C" fn sp_mosaic_load(dir: *const c_char, dense: *const SpModel, out: *mut *mut SpMosaic) -> SpStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let dense = deref(dense, "dense")?;
        let out = out_ref(out, "out")?;
        let mosaic = MosaicModel::load(dir, dense.0.clone()).ffi()?;
        *out = Box::into_raw(Box::new(SpMosaic(mosaic)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`sp_mosaic_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sp_mosaic_free(m: *mut SpMosaic) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Samples with the stage model matching each timestep; same buffer rules as
/// [`sp_model_sample`].
///
/// # Safety
/// `classes` holds `n` labels and `out` has room for `n * pixels` floats.
#[no_mangle]
pub unsafe extern "C" fn sp_mosaic_sample(
    m: *const SpMosaic,
    s: *const SpSchedule,
    steps: usize,
    classes: *const usize,
    n: usize,
    cfg_scale: f32,
    seed: u64,
    out: *mut f32,
) -> SpStatus {
    guard(|| {
        let m = deref(m, "mosaic")?;
        let s = deref(s, "schedule")?;
        let classes = slice_arg(classes, n, "classes")?;
        let out = slice_out(out, n * m.0.dense.config().pixels(), "out")?;
        let r = mosaic_sample(&m.0, &s.0, sampler_of(steps), classes, cfg_scale, seed).ffi()?;
        out.copy_from_slice(r.samples.as_slice().ok_or_else(|| (SpStatus::Internal, "non-contiguous output".into()))?);
        Ok(())
    })
}
