//! C ABI over the pushfuse core.
//!
//! Every function returns a [`PfStatus`]. On failure the message is kept
//! per thread and can be read with [`pf_last_error_message`]. Handles are
//! opaque and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pushfuse::adapt::{self, AdaptationEnsemble, HistoryWindow, ParamEstimate, PriorQuerySet, Source};
use pushfuse::env::{PushEnv, TaskConfig, ACTOR_DIM};
use pushfuse::learn::Checkpoint;
use pushfuse::math::Pose2;
use pushfuse::sim::SimParams;
use pushfuse::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidVariance = 3,
    EmptyPrior = 4,
    EnsembleTooSmall = 5,
    ShapeMismatch = 6,
    Numerical = 7,
    MissingArtifact = 8,
    Io = 9,
    Data = 10,
    EpisodeFinished = 11,
    Panic = 12,
}

impl From<&Error> for PfStatus {
    fn from(e: &Error) -> PfStatus {
        match e {
            Error::InvalidVariance(_) => PfStatus::InvalidVariance,
            Error::EmptyPrior => PfStatus::EmptyPrior,
            Error::EnsembleTooSmall(_) => PfStatus::EnsembleTooSmall,
            Error::ShapeError { .. } => PfStatus::ShapeMismatch,
            Error::NumericalError(_) | Error::SimulationDiverged { .. } => PfStatus::Numerical,
            Error::MissingArtifact(_) => PfStatus::MissingArtifact,
            Error::Io { .. } => PfStatus::Io,
            Error::EpisodeFinished => PfStatus::EpisodeFinished,
            Error::Json(_) | Error::DataError(_) => PfStatus::Data,
            _ => PfStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(PfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure(PfStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PfStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PfStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside pushfuse".into());
            PfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Inverse-variance fusion of two estimates (variances in m^2).
///
/// # Safety
/// `out_value` and `out_variance` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pf_fuse(
    prior_value: f64,
    prior_variance: f64,
    rma_value: f64,
    rma_variance: f64,
    out_value: *mut f64,
    out_variance: *mut f64,
) -> PfStatus {
    guard(|| {
        let v = out_arg(out_value, "out_value")?;
        let var = out_arg(out_variance, "out_variance")?;
        let p = ParamEstimate::new(prior_value, prior_variance, Source::Prior)?;
        let r = ParamEstimate::new(rma_value, rma_variance, Source::Ensemble)?;
        let f = adapt::fuse(&p, &r)?;
        *v = f.value;
        *var = f.variance;
        Ok(())
    })
}

/// Aggregates a prior query set given as JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; the outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pf_prior_aggregate_json(
    json: *const c_char,
    out_value: *mut f64,
    out_variance: *mut f64,
) -> PfStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let v = out_arg(out_value, "out_value")?;
        let var = out_arg(out_variance, "out_variance")?;
        let qs: PriorQuerySet = serde_json::from_str(text).map_err(Error::from)?;
        let p = adapt::aggregate_prior(&qs)?;
        *v = p.value;
        *var = p.variance;
        Ok(())
    })
}

/// Opaque pushing environment.
pub struct PfSim {
    env: PushEnv,
}

/// Creates an environment. `task_json` may be null for the default T-block
/// task; `sim_json` may be null for default physics.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pf_sim_new(
    task_json: *const c_char,
    sim_json: *const c_char,
    seed: u64,
    out: *mut *mut PfSim,
) -> PfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let task = if task_json.is_null() {
            TaskConfig::tblock()
        } else {
            serde_json::from_str(str_arg(task_json, "task_json")?).map_err(Error::from)?
        };
        let params = if sim_json.is_null() {
            SimParams::default()
        } else {
            serde_json::from_str(str_arg(sim_json, "sim_json")?).map_err(Error::from)?
        };
        let env = PushEnv::new(task, params, seed)?;
        *out = Box::into_raw(Box::new(PfSim { env }));
        Ok(())
    })
}

/// # Safety
/// `sim` must come from [`pf_sim_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pf_sim_free(sim: *mut PfSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Starts an episode at an explicit pose with the given true and
/// conditioned CoM (m).
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_sim_reset(
    sim: *mut PfSim,
    x: f64,
    y: f64,
    theta: f64,
    true_com: f64,
    conditioned_com: f64,
    seed: u64,
) -> PfStatus {
    guard(|| {
        let s = out_arg(sim, "sim")?;
        s.env.reset_with(Pose2::new(x, y, theta), true_com, conditioned_com, seed)?;
        Ok(())
    })
}

/// Writes the 9-element actor observation.
///
/// # Safety
/// `sim` must be a live handle; `out_obs` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_sim_observe(sim: *const PfSim, out_obs: *mut f64, len: usize) -> PfStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        if out_obs.is_null() {
            return Err(null("out_obs"));
        }
        if len < ACTOR_DIM {
            return Err(Error::ShapeError {
                expected: ACTOR_DIM.to_string(),
                got: len.to_string(),
            }
            .into());
        }
        let obs = s.env.observe().actor;
        std::slice::from_raw_parts_mut(out_obs, ACTOR_DIM).copy_from_slice(&obs);
        Ok(())
    })
}

/// Result of one control step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PfStep {
    pub reward: f64,
    pub pos_err: f64,
    pub ang_err: f64,
    pub done: bool,
    pub success: bool,
    pub contact: bool,
}

/// Applies a pusher displacement (goal frame, m).
///
/// # Safety
/// `sim` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pf_sim_step(sim: *mut PfSim, dx: f64, dy: f64, out: *mut PfStep) -> PfStatus {
    guard(|| {
        let s = out_arg(sim, "sim")?;
        let o = out_arg(out, "out")?;
        let r = s.env.step([dx, dy])?;
        *o = PfStep {
            reward: r.reward,
            pos_err: r.info.pos_err,
            ang_err: r.info.ang_err,
            done: r.done,
            success: r.info.success,
            contact: r.info.contact,
        };
        Ok(())
    })
}

/// Overrides the conditioned CoM for the next steps.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_sim_set_conditioning(sim: *mut PfSim, value: f64) -> PfStatus {
    guard(|| {
        let s = out_arg(sim, "sim")?;
        if !value.is_finite() {
            return Err(Failure(PfStatus::InvalidArgument, "conditioning must be finite".into()));
        }
        s.env.set_conditioning(value);
        Ok(())
    })
}

/// Opaque adaptation ensemble.
pub struct PfEnsemble {
    ens: AdaptationEnsemble,
}

/// Ensemble mean with its variance split (m, m^2).
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PfEnsembleEstimate {
    pub theta: f64,
    pub var_epi: f64,
    pub var_alea: f64,
    pub var_total: f64,
}

/// Loads an ensemble checkpoint written by `pushfuse train-adapters`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pf_ensemble_load(path: *const c_char, out: *mut *mut PfEnsemble) -> PfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let p = str_arg(path, "path")?;
        let ens = AdaptationEnsemble::from_checkpoint(&Checkpoint::load(Path::new(p))?)?;
        *out = Box::into_raw(Box::new(PfEnsemble { ens }));
        Ok(())
    })
}

/// # Safety
/// `ens` must come from [`pf_ensemble_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pf_ensemble_free(ens: *mut PfEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// History length the ensemble expects, or 0 for a null handle.
///
/// # Safety
/// `ens` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_ensemble_window(ens: *const PfEnsemble) -> usize {
    ens.as_ref().map_or(0, |e| e.ens.k)
}

/// Estimates the CoM from `steps` transitions. `before` and `after` hold
/// `steps * 9` actor observations each, oldest first; only the newest
/// window-length transitions are used.
///
/// # Safety
/// `ens` must be a live handle; `before`/`after` must hold `steps * 9`
/// doubles (they may be null when `steps` is 0); `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pf_ensemble_estimate(
    ens: *const PfEnsemble,
    before: *const f64,
    after: *const f64,
    steps: usize,
    out: *mut PfEnsembleEstimate,
) -> PfStatus {
    guard(|| {
        let e = ens.as_ref().ok_or_else(|| null("ens"))?;
        let o = out_arg(out, "out")?;
        let mut h = HistoryWindow::new(e.ens.k)?;
        if steps > 0 {
            if before.is_null() || after.is_null() {
                return Err(null("observation buffer"));
            }
            let b = std::slice::from_raw_parts(before, steps * ACTOR_DIM);
            let a = std::slice::from_raw_parts(after, steps * ACTOR_DIM);
            for (pb, pa) in b.chunks_exact(ACTOR_DIM).zip(a.chunks_exact(ACTOR_DIM)) {
                h.push(pb, pa)?;
            }
        }
        let est = adapt::ensemble_estimate(&e.ens, &h)?;
        *o = PfEnsembleEstimate {
            theta: est.theta,
            var_epi: est.var_epi,
            var_alea: est.var_alea,
            var_total: est.var_rma,
        };
        Ok(())
    })
}
