//! C ABI over `expool`. Every function returns an [`ExpoolStatus`]; on
//! failure `expool_last_error` describes the error for the calling thread.
//! Strings returned through `char **` are owned by the caller and released
//! with `expool_string_free`. Handles are released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use expool::btd::{self, FitConfig};
use expool::error::Error;
use expool::evolve::{self, spearman_rho, EvolveConfig};
use expool::pool::{GuidanceLevel, Pool};
use expool::ranking::PairwiseStats;
use expool::simenv::{MockEncoder, MockLanguage, World, WorldSpec};
use expool::types::{canonical_key, DegradationSet, ImageRef, Preference, Ranking};
use expool::workflow::{Workflow, WorkflowConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpoolStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or an out-of-range enum value.
    InvalidArgument = 1,
    InvalidInput = 2,
    NotFound = 3,
    Io = 4,
    Parse = 5,
    Numerical = 6,
    OracleUnavailable = 7,
    OracleProtocol = 8,
    Config = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpoolPreference {
    Fidelity = 0,
    Perception = 1,
}

fn parse_preference(p: u32) -> Result<Preference, Failure> {
    match p {
        x if x == ExpoolPreference::Fidelity as u32 => Ok(Preference::Fidelity),
        x if x == ExpoolPreference::Perception as u32 => Ok(Preference::Perception),
        _ => Err(bad_arg(format!("unknown preference {p}"))),
    }
}

/// Simulated environment.
pub struct ExpoolWorld {
    world: Arc<World>,
}

/// Experience pool.
pub struct ExpoolPool {
    pool: Pool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ExpoolStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ImageNotFound(_) | Error::UnknownDegradation(_) | Error::UnknownTool { .. } => ExpoolStatus::NotFound,
            Error::Io { .. } => ExpoolStatus::Io,
            Error::ParseError { .. } | Error::UnsupportedVersion { .. } => ExpoolStatus::Parse,
            Error::NumericalInstability(_) | Error::DegenerateData(_) => ExpoolStatus::Numerical,
            Error::OracleUnavailable(_) => ExpoolStatus::OracleUnavailable,
            Error::OracleProtocol(_) => ExpoolStatus::OracleProtocol,
            Error::ConfigError(_) | Error::SpecError(_) => ExpoolStatus::Config,
            _ => ExpoolStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn bad_arg(msg: impl Into<String>) -> Failure {
    Failure(ExpoolStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ExpoolStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ExpoolStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ExpoolStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(bad_arg(format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| bad_arg(format!("`{name}` is not UTF-8")))
}

unsafe fn str_array(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(bad_arg(format!("`{name}` is null")));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .map(|s| str_arg(*s, name).map(str::to_string))
        .collect()
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| bad_arg(format!("`{name}` is null")))
}

fn to_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn expool_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn expool_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn expool_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Canonical `+`-joined key of a degradation set.
///
/// # Safety
/// `ids` must point to `n` valid C strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn expool_canonical_key(ids: *const *const c_char, n: usize, out: *mut *mut c_char) -> ExpoolStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ids = str_array(ids, n, "ids")?;
        let key = canonical_key(&DegradationSet::from_ids(&ids)?)?;
        *out = to_c(key);
        Ok(())
    })
}

/// Spearman's ρ between two rankings given best first.
///
/// # Safety
/// `a`/`b` must point to `na`/`nb` valid C strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn expool_spearman(
    a: *const *const c_char,
    na: usize,
    b: *const *const c_char,
    nb: usize,
    out: *mut f64,
) -> ExpoolStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let a = Ranking::from_ordered(str_array(a, na, "a")?)?;
        let b = Ranking::from_ordered(str_array(b, nb, "b")?)?;
        *out = spearman_rho(&a, &b)?;
        Ok(())
    })
}

/// Fits abilities and tie intensity to pairwise counts. `wins[i*k + j]` is
/// how often i beat j; `ties` is symmetric. Writes `k` abilities to `theta`
/// and the tie intensity to `nu`.
///
/// # Safety
/// `wins` and `ties` must hold `k*k` values; `theta` room for `k`.
#[no_mangle]
pub unsafe extern "C" fn expool_btd_fit(
    k: usize,
    wins: *const u64,
    ties: *const u64,
    theta: *mut f64,
    nu: *mut f64,
    converged: *mut bool,
) -> ExpoolStatus {
    guard(|| {
        if k < 2 {
            return Err(Failure::from(Error::NotEnoughCandidates(k)));
        }
        if wins.is_null() || ties.is_null() || theta.is_null() {
            return Err(bad_arg("`wins`, `ties` and `theta` must be non-null"));
        }
        let nu = out_ptr(nu, "nu")?;
        let converged = out_ptr(converged, "converged")?;
        let w = std::slice::from_raw_parts(wins, k * k);
        let t = std::slice::from_raw_parts(ties, k * k);
        let mut stats = PairwiseStats::new((0..k).map(|i| format!("c{i}")).collect());
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                if t[i * k + j] != t[j * k + i] {
                    return Err(bad_arg("`ties` must be symmetric"));
                }
                stats.wins[i][j] = w[i * k + j];
                stats.losses[i][j] = w[j * k + i];
                stats.ties[i][j] = t[i * k + j];
            }
        }
        let fit = btd::fit(&stats, &FitConfig::default())?;
        std::slice::from_raw_parts_mut(theta, k).copy_from_slice(&fit.theta);
        *nu = fit.nu;
        *converged = fit.converged;
        Ok(())
    })
}

/// Creates a world from a preset name (`group-a`, `dominant`, ...).
///
/// # Safety
/// `name` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn expool_world_preset(name: *const c_char, seed: u64, out: *mut *mut ExpoolWorld) -> ExpoolStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let world = World::preset(str_arg(name, "name")?, seed)?;
        *out = Box::into_raw(Box::new(ExpoolWorld { world: Arc::new(world) }));
        Ok(())
    })
}

/// Loads a world spec file.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn expool_world_load(path: *const c_char, out: *mut *mut ExpoolWorld) -> ExpoolStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let world = World::new(WorldSpec::load(Path::new(str_arg(path, "path")?))?)?;
        *out = Box::into_raw(Box::new(ExpoolWorld { world: Arc::new(world) }));
        Ok(())
    })
}

/// # Safety
/// `world` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn expool_world_free(world: *mut ExpoolWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Generates `n` images from the world's mixture; writes their ids as a
/// JSON array.
///
/// # Safety
/// `world` must be a live handle; `prefix` a valid C string; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn expool_world_generate(
    world: *const ExpoolWorld,
    prefix: *const c_char,
    n: usize,
    out_json: *mut *mut c_char,
) -> ExpoolStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        let world = world.as_ref().ok_or_else(|| bad_arg("`world` is null"))?;
        let ids = world.world.generate_images(str_arg(prefix, "prefix")?, n, None)?;
        let ids: Vec<&str> = ids.iter().map(ImageRef::as_str).collect();
        *out = to_c(serde_json::to_string(&ids).expect("ids serialize"));
        Ok(())
    })
}

/// Creates an empty pool.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn expool_pool_new(out: *mut *mut ExpoolPool) -> ExpoolStatus {
    guard(|| {
        *out_ptr(out, "out")? = Box::into_raw(Box::new(ExpoolPool { pool: Pool::new() }));
        Ok(())
    })
}

/// Loads a pool directory.
///
/// # Safety
/// `dir` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn expool_pool_load(dir: *const c_char, out: *mut *mut ExpoolPool) -> ExpoolStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let pool = Pool::load(Path::new(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(ExpoolPool { pool }));
        Ok(())
    })
}

/// Saves a pool directory atomically.
///
/// # Safety
/// `pool` must be a live handle; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn expool_pool_save(pool: *const ExpoolPool, dir: *const c_char) -> ExpoolStatus {
    guard(|| {
        let pool = pool.as_ref().ok_or_else(|| bad_arg("`pool` is null"))?;
        pool.pool.save(Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `pool` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn expool_pool_free(pool: *mut ExpoolPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// Acquires and evolves on the given images with the simulated oracles;
/// writes the round reports as JSON. `preference` is an `expool_preference`.
///
/// # Safety
/// Handles must be live; `image_ids` must point to `n` valid C strings.
#[no_mangle]
pub unsafe extern "C" fn expool_pool_train(
    pool: *mut ExpoolPool,
    world: *const ExpoolWorld,
    image_ids: *const *const c_char,
    n: usize,
    preference: u32,
    out_json: *mut *mut c_char,
) -> ExpoolStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        let pool = pool.as_mut().ok_or_else(|| bad_arg("`pool` is null"))?;
        let world = world.as_ref().ok_or_else(|| bad_arg("`world` is null"))?;
        let images: Vec<ImageRef> = str_array(image_ids, n, "image_ids")?
            .into_iter()
            .map(ImageRef::new)
            .collect();
        let language = MockLanguage::new(world.world.clone());
        let encoder = MockEncoder::new(world.world.clone());
        let outcome = evolve::train(
            world.world.as_ref(),
            &mut pool.pool,
            &images,
            parse_preference(preference)?,
            &EvolveConfig::default(),
            &language,
            &encoder,
        )?;
        *out = to_c(serde_json::to_string(&outcome).expect("outcome serializes"));
        Ok(())
    })
}

/// Runs the inference workflow on one image with fine-grained guidance and
/// the default budgets; writes the trace as JSON. `preference` is an
/// `expool_preference`.
///
/// # Safety
/// Handles must be live; `image_id` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn expool_infer(
    world: *const ExpoolWorld,
    pool: *const ExpoolPool,
    image_id: *const c_char,
    preference: u32,
    out_json: *mut *mut c_char,
) -> ExpoolStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        let world = world.as_ref().ok_or_else(|| bad_arg("`world` is null"))?;
        let pool = pool.as_ref().ok_or_else(|| bad_arg("`pool` is null"))?;
        let image = ImageRef::new(str_arg(image_id, "image_id")?);
        let language = MockLanguage::new(world.world.clone());
        let encoder = MockEncoder::new(world.world.clone());
        let mut config = WorkflowConfig::new(parse_preference(preference)?);
        config.max_level = GuidanceLevel::Fine;
        let trace = Workflow {
            env: world.world.as_ref(),
            pool: &pool.pool,
            language: &language,
            encoder: &encoder,
            config,
        }
        .run(&image)?;
        *out = to_c(trace.to_json());
        Ok(())
    })
}
