//! C ABI over the `stateguide` library.
//!
//! Objects cross the boundary as opaque handles created by `sg_*_new`,
//! `sg_*_load` or `sg_*_train` and released with the matching `sg_*_free`.
//! Every fallible call returns an [`SgStatus`]; on failure a description is
//! available from [`sg_last_error`] on the same thread. Panics never unwind
//! into the caller: they surface as `SG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stateguide::cli::{offline_config, schema};
use stateguide::config::{parse_pairs, RunConfig};
use stateguide::discretise::{discretise, BinMode, DiscretiserConfig, NormStats};
use stateguide::env::{generate_dataset, load_dataset, make_behaviour_policy, save_dataset, strip_actions, Dataset, EnvSpec, Quality};
use stateguide::offline::{load_model, save_model, train_model, ModelKind, PretrainedModel};
use stateguide::online::load_actor;
use stateguide::rng::Rng;
use stateguide::theory::{check_bound, IncrementMdp, IncrementMdpConfig, DEFAULT_TOLERANCE};
use stateguide::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    MissingActions = 7,
    BoundViolated = 8,
    Panic = 9,
}

/// Environment specification handle.
pub struct SgEnv {
    spec: EnvSpec,
}

/// Offline dataset handle.
pub struct SgDataset {
    data: Dataset,
}

/// Pretrained state policy (or baseline) handle.
pub struct SgModel {
    model: PretrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let clean = message.replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(clean).unwrap_or_default());
}

struct Failure(SgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. } => SgStatus::DimensionMismatch,
            Error::Io { .. } => SgStatus::Io,
            Error::Format(_) | Error::Truncated(_) => SgStatus::Format,
            Error::NonFinite(_)
            | Error::NonFiniteGradient { .. }
            | Error::Diverged { .. }
            | Error::NonConvergence { .. } => SgStatus::Numerical,
            Error::MissingActions(_) => SgStatus::MissingActions,
            Error::Bound(_) => SgStatus::BoundViolated,
            _ => SgStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SgStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SgStatus::InvalidArgument, msg.into())
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            SgStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            SgStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), Failure> {
    if expected == got {
        Ok(())
    } else {
        Err(Failure(SgStatus::DimensionMismatch, format!("{what}: expected length {expected}, got {got}")))
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failed call on this thread (empty after a
/// success). Valid until the next `sg_*` call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_env_new(name: *const c_char, out: *mut *mut SgEnv) -> SgStatus {
    guard(|| {
        let spec = EnvSpec::from_name(text(name, "name")?)?;
        emit(out, SgEnv { spec })
    })
}

/// # Safety
/// `env` must come from `sg_env_new` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_env_free(env: *mut SgEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn sg_env_state_dim(env: *const SgEnv) -> usize {
    env.as_ref().map_or(0, |e| e.spec.state_dim)
}

/// # Safety
/// `env` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn sg_env_action_dim(env: *const SgEnv) -> usize {
    env.as_ref().map_or(0, |e| e.spec.action_dim)
}

/// # Safety
/// `env` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn sg_env_horizon(env: *const SgEnv) -> usize {
    env.as_ref().map_or(0, |e| e.spec.horizon)
}

/// Sample an initial state with the given seed into `state_out[state_len]`.
///
/// # Safety
/// `env` must be live; `state_out` must hold `state_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_env_reset(env: *const SgEnv, seed: u64, state_out: *mut f64, state_len: usize) -> SgStatus {
    guard(|| {
        let env = handle(env, "env")?;
        check_len("state", env.spec.state_dim, state_len)?;
        let out = slice_mut(state_out, state_len, "state_out")?;
        out.copy_from_slice(&env.spec.reset(&mut Rng::new(seed)));
        Ok(())
    })
}

/// Advance one step. Actions outside the box are clipped.
///
/// # Safety
/// `env` must be live; `state` and `next_out` hold `state_dim` doubles,
/// `action` holds `action_dim` doubles; `reward_out` and `terminal_out` are
/// valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sg_env_step(
    env: *const SgEnv,
    state: *const f64,
    action: *const f64,
    next_out: *mut f64,
    reward_out: *mut f64,
    terminal_out: *mut bool,
) -> SgStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let (m, n) = (env.spec.state_dim, env.spec.action_dim);
        let state = slice(state, m, "state")?;
        let action = slice(action, n, "action")?;
        let next = slice_mut(next_out, m, "next_out")?;
        if reward_out.is_null() || terminal_out.is_null() {
            return Err(null("reward_out or terminal_out"));
        }
        let outcome = env.spec.step(state, action)?;
        next.copy_from_slice(&outcome.next_state);
        *reward_out = outcome.reward;
        *terminal_out = outcome.terminal;
        Ok(())
    })
}

/// Roll out a behaviour policy of `quality` ("random", "medium", "expert",
/// "mixture") for `n` transitions. `expert_actor_path` may be null only for
/// random data.
///
/// # Safety
/// Strings must be NUL-terminated (or null where allowed); `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_generate(
    env: *const SgEnv,
    quality: *const c_char,
    n: usize,
    seed: u64,
    expert_actor_path: *const c_char,
    action_free: bool,
    out: *mut *mut SgDataset,
) -> SgStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let quality = Quality::parse(text(quality, "quality")?)?;
        let expert = if expert_actor_path.is_null() {
            None
        } else {
            Some(load_actor(text(expert_actor_path, "expert_actor_path")?, &env.spec)?)
        };
        let mut policy = make_behaviour_policy(&env.spec, quality, expert)?;
        let mut data = generate_dataset(&env.spec, &mut policy, quality, n, &mut Rng::new(seed))?;
        if action_free {
            data = strip_actions(&data);
        }
        emit(out, SgDataset { data })
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_load(path: *const c_char, out: *mut *mut SgDataset) -> SgStatus {
    guard(|| {
        let data = load_dataset(text(path, "path")?)?;
        emit(out, SgDataset { data })
    })
}

/// # Safety
/// `dataset` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_save(dataset: *const SgDataset, path: *const c_char) -> SgStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        save_dataset(&ds.data, text(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_free(dataset: *mut SgDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_len(dataset: *const SgDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.len())
}

/// # Safety
/// `dataset` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_state_dim(dataset: *const SgDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.state_dim())
}

/// # Safety
/// `dataset` must be a live handle or null (which yields false).
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_is_action_free(dataset: *const SgDataset) -> bool {
    dataset.as_ref().is_some_and(|d| d.data.is_action_free())
}

/// Pretrain on `dataset`. `config` is optional `key = value` text using the
/// keys of the `pretrain` command (`algo`, `steps`, `alpha`, `hidden`, ...);
/// the `data` key is ignored.
///
/// # Safety
/// `dataset` must be live; `config` NUL-terminated or null; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sg_model_train(dataset: *const SgDataset, config: *const c_char, out: *mut *mut SgModel) -> SgStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let layers = if config.is_null() { Vec::new() } else { vec![parse_pairs(text(config, "config")?)?] };
        let resolved = RunConfig::resolve("pretrain", schema("pretrain"), &layers)?;
        let kind = ModelKind::parse(resolved.str("algo")?)?;
        let seed: u64 = resolved.parse("seed")?;
        let model = train_model(kind, &ds.data, &offline_config(&resolved)?, &mut Rng::new(seed))?;
        emit(out, SgModel { model })
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_model_load(path: *const c_char, out: *mut *mut SgModel) -> SgStatus {
    guard(|| {
        let model = load_model(text(path, "path")?)?;
        emit(out, SgModel { model })
    })
}

/// # Safety
/// `model` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sg_model_save(model: *const SgModel, path: *const c_char) -> SgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        save_model(&m.model, text(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_model_free(model: *mut SgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn sg_model_state_dim(model: *const SgModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.state_dim)
}

/// Algorithm name of the model as a static string, or null for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sg_model_kind(model: *const SgModel) -> *const c_char {
    let Some(m) = model.as_ref() else { return ptr::null() };
    let name: &'static [u8] = match m.model.kind {
        ModelKind::Oso => b"oso\0",
        ModelKind::DecqnN => b"decqn_n\0",
        ModelKind::BcDelta => b"bc_delta\0",
        ModelKind::BcNextState => b"bc_sprime\0",
        ModelKind::BcDiff => b"bc_diff\0",
        ModelKind::BcAction => b"bc_a\0",
    };
    name.as_ptr().cast()
}

/// Greedy state-difference code for `state`, written as values in
/// {-1, 0, +1} to `code_out[code_len]` (`code_len` equals the state dimension).
/// Only code-producing models (oso, decqn_n, bc_delta) are accepted.
///
/// # Safety
/// `model` must be live; `state` holds `state_len` doubles and `code_out`
/// holds `code_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sg_model_greedy_code(
    model: *const SgModel,
    state: *const f64,
    state_len: usize,
    code_out: *mut i8,
    code_len: usize,
) -> SgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        check_len("state", m.model.state_dim, state_len)?;
        check_len("code", m.model.state_dim, code_len)?;
        let state = slice(state, state_len, "state")?;
        let out = slice_mut(code_out, code_len, "code_out")?;
        let code = m.model.greedy_code(state)?;
        out.copy_from_slice(code.values());
        Ok(())
    })
}

/// Discretise the transition `state -> next` with per-dimension statistics
/// `mean`/`std` (all of length `dim`). `bins` is 2 or 3; `epsilon` is the
/// dead zone for 3 bins and ignored for 2.
///
/// # Safety
/// All arrays must hold `dim` elements.
#[no_mangle]
pub unsafe extern "C" fn sg_discretise(
    state: *const f64,
    next: *const f64,
    mean: *const f64,
    std: *const f64,
    dim: usize,
    epsilon: f64,
    bins: u32,
    code_out: *mut i8,
) -> SgStatus {
    guard(|| {
        let stats = NormStats::new(slice(mean, dim, "mean")?.to_vec(), slice(std, dim, "std")?.to_vec())?;
        let config = match BinMode::from_bins(bins as usize)? {
            BinMode::Three => DiscretiserConfig::three_bin(epsilon),
            BinMode::Two => DiscretiserConfig::two_bin(),
        };
        config.validate()?;
        let code = discretise(slice(state, dim, "state")?, slice(next, dim, "next")?, &stats, &config)?;
        slice_mut(code_out, dim, "code_out")?.copy_from_slice(code.values());
        Ok(())
    })
}

/// Run the discretisation-bound harness on the default increment MDP with
/// `dims` state dimensions. Per-k results go to the optional arrays
/// `gap_out`, `bound_out` (value-gap bound) and `eps_kl_out`, each of length `n_k`.
/// Returns `SG_STATUS_BOUND_VIOLATED` (outputs still written) if any check fails.
///
/// # Safety
/// `k_list` holds `n_k` entries; non-null output arrays hold `n_k` doubles;
/// `slope_out` is valid or null.
#[no_mangle]
pub unsafe extern "C" fn sg_theory_check(
    dims: usize,
    k_list: *const usize,
    n_k: usize,
    gamma: f64,
    sigma: f64,
    gap_out: *mut f64,
    bound_out: *mut f64,
    eps_kl_out: *mut f64,
    slope_out: *mut f64,
) -> SgStatus {
    guard(|| {
        let ks = slice(k_list, n_k, "k_list")?;
        let config = IncrementMdpConfig { dims, gamma, sigma, ..IncrementMdpConfig::default() };
        let mdp = IncrementMdp::build(&config, &mut Rng::new(0))?;
        let report = check_bound(&mdp, ks, DEFAULT_TOLERANCE)?;
        for (out, pick) in [
            (gap_out, (|r| r.gap) as fn(&stateguide::theory::BoundRow) -> f64),
            (bound_out, |r| r.lemma2_bound),
            (eps_kl_out, |r| r.eps_kl),
        ] {
            if !out.is_null() {
                for (slot, row) in slice_mut(out, n_k, "output array")?.iter_mut().zip(&report.rows) {
                    *slot = pick(row);
                }
            }
        }
        if !slope_out.is_null() {
            *slope_out = report.slope_estimate;
        }
        report.ensure_holds()?;
        Ok(())
    })
}
