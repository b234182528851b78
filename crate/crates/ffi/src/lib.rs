//! C ABI over polybubble. Objects are opaque handles created by `pb_*_new`
//! functions and released by the matching `pb_*_free`. Every fallible call
//! returns a `PbStatus`; the message of the last error on the calling thread
//! is available through `pb_last_error`.

use polybubble::bubbles::{solve_kappa, CouplingData, Dimension};
use polybubble::cli::{execute, RunConfig, Stage};
use polybubble::geometry::{canonical_lambda, PolygonConfig};
use polybubble::quadrature::{constants_B_C, QuadratureBudget};
use polybubble::reduction::interaction_sum;
use polybubble::residual::{Ansatz, ResidualMode};
use polybubble::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Domain = 4,
    HalfBubble = 5,
    Quadrature = 6,
    IllConditioned = 7,
    Solver = 8,
    Degree = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Residual decomposition selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbResidualMode {
    Canonical = 0,
    Printed = 1,
    Corrected = 2,
}

/// Synchronized coupling data (beta, kappa, s).
pub struct PbCoupling(CouplingData);

/// Parsed and validated run configuration.
pub struct PbConfig(RunConfig);

/// Polygonal ansatz built from a configuration.
pub struct PbAnsatz(Ansatz);

/// Bubble constants for one dimension.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PbConstants {
    pub b_w: f64,
    pub c_w: f64,
    pub b_rel_error: f64,
    pub c_rel_error: f64,
    pub b_u: f64,
    pub b_v: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PbStatus {
    match e {
        Error::InvalidInput(_) | Error::Dimension(_) | Error::SynchronizationUndefined(_) => PbStatus::InvalidInput,
        Error::Config(_) => PbStatus::Config,
        Error::Domain(_) => PbStatus::Domain,
        Error::HalfBubble(_) => PbStatus::HalfBubble,
        Error::Quadrature { .. } => PbStatus::Quadrature,
        Error::IllConditioned(_) => PbStatus::IllConditioned,
        Error::LinearSolve(_) | Error::Solver(_) | Error::NoCriticalPoint(_) => PbStatus::Solver,
        Error::Degree(_) => PbStatus::Degree,
        Error::Io(_) => PbStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), (PbStatus, String)>>(f: F) -> PbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PbStatus::Ok,
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("panic in polybubble".into());
            PbStatus::Panic
        }
    }
}

fn lib(e: Error) -> (PbStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PbStatus, String) {
    (PbStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PbStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PbStatus::InvalidInput, format!("{what} is not UTF-8")))
}

fn dim(n: u32) -> Result<Dimension, (PbStatus, String)> {
    Dimension::new(n as usize).map_err(lib)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message of this thread into `buf` (NUL-terminated).
/// Writes the required size including the NUL to `needed` when non-null.
///
/// # Safety
/// `buf` must point to `len` writable bytes or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn pb_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> PbStatus {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map(|c| c.as_bytes_with_nul()).unwrap_or(b"\0");
        if !needed.is_null() {
            *needed = bytes.len();
        }
        if buf.is_null() || len < bytes.len() {
            return PbStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, bytes.len());
        PbStatus::Ok
    })
}

/// Coupling with an explicit kappa root.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn pb_coupling_new(n: u32, beta: f64, kappa: f64, out: *mut *mut PbCoupling) -> PbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c = CouplingData::new(dim(n)?, beta, kappa).map_err(lib)?;
        *out = Box::into_raw(Box::new(PbCoupling(c)));
        Ok(())
    })
}

/// Coupling on the symmetric root kappa = 1.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn pb_coupling_symmetric(n: u32, beta: f64, out: *mut *mut PbCoupling) -> PbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c = CouplingData::symmetric(dim(n)?, beta).map_err(lib)?;
        *out = Box::into_raw(Box::new(PbCoupling(c)));
        Ok(())
    })
}

/// Reads kappa and s of a coupling.
///
/// # Safety
/// `c` must be a live handle; `kappa` and `s` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn pb_coupling_get(c: *const PbCoupling, kappa: *mut f64, s: *mut f64) -> PbStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("coupling"))?;
        if !kappa.is_null() {
            *kappa = c.0.kappa;
        }
        if !s.is_null() {
            *s = c.0.s;
        }
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle from `pb_coupling_new`/`pb_coupling_symmetric`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_coupling_free(c: *mut PbCoupling) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Positive kappa roots in [lo, hi]. Writes at most `cap` roots and the total to `count`.
///
/// # Safety
/// `roots` must point to `cap` writable doubles (or be null with `cap == 0`); `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pb_solve_kappa(n: u32, beta: f64, lo: f64, hi: f64, roots: *mut f64, cap: usize, count: *mut usize) -> PbStatus {
    guard(|| {
        if count.is_null() {
            return Err(null("count"));
        }
        let rs = solve_kappa(beta, dim(n)?, (lo, hi)).map_err(lib)?;
        *count = rs.len();
        if rs.len() > cap || (cap > 0 && roots.is_null()) {
            if rs.is_empty() {
                return Ok(());
            }
            return Err((PbStatus::BufferTooSmall, format!("{} roots, capacity {cap}", rs.len())));
        }
        for (i, r) in rs.iter().enumerate() {
            *roots.add(i) = r.kappa;
        }
        Ok(())
    })
}

/// Closed-form and quadrature bubble constants for a coupling.
///
/// # Safety
/// `c` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pb_constants(c: *const PbCoupling, out: *mut PbConstants) -> PbStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("coupling"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let k = constants_B_C(&c.0, &QuadratureBudget::default()).map_err(lib)?;
        *out = PbConstants {
            b_w: k.b_w,
            c_w: k.c_w,
            b_rel_error: k.b_rel_error,
            c_rel_error: k.c_rel_error,
            b_u: k.b_u,
            b_v: k.b_v,
        };
        Ok(())
    })
}

/// Closed-form interaction sum lambda^{N-1} sum_j |x_1 - x_j|^{2-N}.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pb_interaction_sum(k: u32, rbar: f64, lambda: f64, n: u32, out: *mut f64) -> PbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = interaction_sum(k as usize, rbar, lambda, dim(n)?).map_err(lib)?.normalized;
        Ok(())
    })
}

/// Parses a JSON run configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn pb_config_from_json(json: *const c_char, out: *mut *mut PbConfig) -> PbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = read_str(json, "json")?;
        let cfg = RunConfig::from_json(text).map_err(lib)?;
        *out = Box::into_raw(Box::new(PbConfig(cfg)));
        Ok(())
    })
}

/// Writes the 64-character configuration hash plus NUL into `buf` (65 bytes).
///
/// # Safety
/// `cfg` must be a live handle and `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pb_config_hash(cfg: *const PbConfig, buf: *mut c_char, len: usize) -> PbStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        let h = cfg.0.hash();
        if buf.is_null() || len < h.len() + 1 {
            return Err((PbStatus::BufferTooSmall, format!("hash needs {} bytes", h.len() + 1)));
        }
        std::ptr::copy_nonoverlapping(h.as_ptr() as *const c_char, buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from `pb_config_from_json`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_config_free(cfg: *mut PbConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs a CLI command ("constants", "residual-scaling", "reduce", "correct",
/// "pohozaev", "full-audit") and writes its reports into `out_dir`. The CLI
/// exit code is stored in `exit_code`.
///
/// # Safety
/// `cfg` must be a live handle; `command` and `out_dir` NUL-terminated strings; `exit_code` valid.
#[no_mangle]
pub unsafe extern "C" fn pb_run_command(cfg: *const PbConfig, command: *const c_char, out_dir: *const c_char, exit_code: *mut i32) -> PbStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        if exit_code.is_null() {
            return Err(null("exit_code"));
        }
        let cmd = read_str(command, "command")?;
        let out = read_str(out_dir, "out_dir")?;
        let (name, stages) = match cmd {
            "constants" => ("constants", vec![Stage::Constants]),
            "residual-scaling" => ("residual_scaling", vec![Stage::ResidualScaling]),
            "reduce" => ("reduce", vec![Stage::Reduce]),
            "correct" => ("correct", vec![Stage::Correct]),
            "pohozaev" => ("pohozaev", vec![Stage::Pohozaev]),
            "full-audit" => (
                "full_audit",
                cfg.0.stages.clone().unwrap_or_else(|| {
                    vec![Stage::Constants, Stage::ResidualScaling, Stage::Correct, Stage::Reduce, Stage::Pohozaev]
                }),
            ),
            other => return Err((PbStatus::InvalidInput, format!("unknown command {other}"))),
        };
        *exit_code = execute(name, &stages, &cfg.0, Path::new(out)).map_err(lib)?;
        Ok(())
    })
}

/// Ansatz with k bubbles at concentration lambda, using the configuration's
/// coupling, potential, center and cutoff. lambda <= 0 selects the canonical
/// window t k^{(N-2)/(N-4)} with t from the configuration.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn pb_ansatz_new(cfg: *const PbConfig, k: u32, lambda: f64, out: *mut *mut PbAnsatz) -> PbStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = cfg.0.resolve().map_err(lib)?;
        let lambda = if lambda > 0.0 {
            lambda
        } else {
            let t = polybubble::cli::resolve_t(&cfg.0, &r).map_err(lib)?;
            canonical_lambda(t, k as usize, r.dim)
        };
        let pc = PolygonConfig::new(k as usize, r.rbar, r.ybar2.clone(), lambda, r.coupling).map_err(lib)?;
        let a = Ansatz::new(pc, r.potential, cfg.0.cutoff.clone()).map_err(lib)?;
        *out = Box::into_raw(Box::new(PbAnsatz(a)));
        Ok(())
    })
}

/// Ansatz W_1 at a point y of length N.
///
/// # Safety
/// `a` must be a live handle, `y` must point to `len` doubles, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pb_ansatz_eval(a: *const PbAnsatz, y: *const f64, len: usize, out: *mut f64) -> PbStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("ansatz"))?;
        if y.is_null() || out.is_null() {
            return Err(null("y or out"));
        }
        *out = a.0.w1(std::slice::from_raw_parts(y, len)).map_err(lib)?;
        Ok(())
    })
}

/// Residual pair (R_1, R_2) of the ansatz at y.
///
/// # Safety
/// `a` must be a live handle, `y` must point to `len` doubles, `r1` and `r2` valid.
#[no_mangle]
pub unsafe extern "C" fn pb_ansatz_residual(
    a: *const PbAnsatz,
    y: *const f64,
    len: usize,
    mode: PbResidualMode,
    r1: *mut f64,
    r2: *mut f64,
) -> PbStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("ansatz"))?;
        if y.is_null() || r1.is_null() || r2.is_null() {
            return Err(null("y, r1 or r2"));
        }
        let m = match mode {
            PbResidualMode::Canonical => ResidualMode::Canonical,
            PbResidualMode::Printed => ResidualMode::Printed,
            PbResidualMode::Corrected => ResidualMode::Corrected,
        };
        let (a1, a2) = a.0.residual(std::slice::from_raw_parts(y, len), m).map_err(lib)?;
        *r1 = a1;
        *r2 = a2;
        Ok(())
    })
}

/// # Safety
/// `a` must be null or a handle from `pb_ansatz_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pb_ansatz_free(a: *mut PbAnsatz) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}
