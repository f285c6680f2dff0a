//! C ABI over the `arpg` crate.
//!
//! Models are opaque handles created by [`arpg_model_load`] or
//! [`arpg_model_init`] and released with [`arpg_model_free`]. Every fallible
//! call returns an [`ArpgStatus`]; on failure the message is available from
//! [`arpg_last_error`] on the same thread until the next failing call.
//! Token buffers are row-major `uint32_t` grids.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use arpg::decoding::{inpaint, DecodeConfig, GenerationState};
use arpg::model::{param_count, ArpgModel, AttentionPattern, Checkpoint, ModelConfig};
use arpg::ordering::{schedule_counts, CfgKind, DecodeSchedule, OrderKind, ScheduleKind};
use arpg::training::TokenGrid;
use arpg::ArpgError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArpgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Dimension = 6,
    Contract = 7,
    BufferTooSmall = 8,
    Runtime = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArpgSchedule {
    Arccos = 0,
    Cosine = 1,
    Uniform = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArpgPattern {
    Causal = 0,
    BlockCausal = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArpgOrder {
    Random = 0,
    Raster = 1,
    SpiralIn = 2,
    SpiralOut = 3,
    ZCurve = 4,
    Alternate = 5,
}

/// Decode options; fill with [`arpg_decode_options_default`] first.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct ArpgDecodeOptions {
    pub steps: usize,
    pub schedule: ArpgSchedule,
    pub pattern: ArpgPattern,
    pub order: ArpgOrder,
    /// Terminal guidance scale; 1 disables guidance.
    pub cfg_scale: f64,
    /// Nonzero keeps the scale constant instead of ramping it linearly.
    pub cfg_constant: u8,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
}

/// Shape of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct ArpgModelInfo {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub hidden: usize,
    pub num_parameters: usize,
}

/// Opaque model handle.
pub struct ArpgHandle {
    model: ArpgModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &ArpgError) -> ArpgStatus {
    match err {
        ArpgError::Config(_) => ArpgStatus::Config,
        ArpgError::Io { .. } => ArpgStatus::Io,
        ArpgError::Format { .. } => ArpgStatus::Format,
        ArpgError::Dimension(_) => ArpgStatus::Dimension,
        ArpgError::Contract(_) | ArpgError::Index(_) | ArpgError::Range(_) => ArpgStatus::Contract,
        ArpgError::NonFiniteLoss { .. } => ArpgStatus::Runtime,
    }
}

struct Failure(ArpgStatus, String);

impl From<ArpgError> for Failure {
    fn from(e: ArpgError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ArpgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ArpgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ArpgStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ArpgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ArpgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn decode_config(o: &ArpgDecodeOptions) -> DecodeConfig {
    DecodeConfig {
        steps: o.steps,
        schedule: match o.schedule {
            ArpgSchedule::Arccos => ScheduleKind::Arccos,
            ArpgSchedule::Cosine => ScheduleKind::Cosine,
            ArpgSchedule::Uniform => ScheduleKind::Uniform,
        },
        cfg_kind: if o.cfg_constant != 0 { CfgKind::Constant } else { CfgKind::Linear },
        cfg_scale: o.cfg_scale,
        temperature: o.temperature,
        top_k: (o.top_k > 0).then_some(o.top_k),
        top_p: o.top_p,
        pattern: match o.pattern {
            ArpgPattern::Causal => AttentionPattern::Causal,
            ArpgPattern::BlockCausal => AttentionPattern::BlockCausal,
        },
        order: match o.order {
            ArpgOrder::Random => OrderKind::Random,
            ArpgOrder::Raster => OrderKind::Raster,
            ArpgOrder::SpiralIn => OrderKind::SpiralIn,
            ArpgOrder::SpiralOut => OrderKind::SpiralOut,
            ArpgOrder::ZCurve => OrderKind::ZCurve,
            ArpgOrder::Alternate => OrderKind::Alternate,
        },
        seed: o.seed,
    }
}

fn model_config(json: &str) -> Result<ModelConfig, Failure> {
    let c: ModelConfig = serde_json::from_str(json)
        .map_err(|e| Failure(ArpgStatus::Config, format!("model config JSON: {e}")))?;
    c.validate()?;
    Ok(c)
}

fn copy_tokens(grids: &[TokenGrid], out: &mut [u32]) -> Result<(), Failure> {
    let need: usize = grids.iter().map(TokenGrid::len).sum();
    if out.len() < need {
        return Err(Failure(
            ArpgStatus::BufferTooSmall,
            format!("output holds {} tokens, {need} needed", out.len()),
        ));
    }
    for (dst, &t) in out.iter_mut().zip(grids.iter().flat_map(|g| g.tokens.iter())) {
        *dst = t as u32;
    }
    Ok(())
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn arpg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn arpg_model_load(path: *const c_char, out: *mut *mut ArpgHandle) -> ArpgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let model = Checkpoint::<f32>::load(Path::new(path))?.model()?;
        *out = Box::into_raw(Box::new(ArpgHandle { model }));
        Ok(())
    })
}

/// Creates a randomly initialised model from a JSON model configuration
/// (missing keys take their defaults; `"{}"` is the default model).
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn arpg_model_init(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut ArpgHandle,
) -> ArpgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = model_config(c_str(config_json, "config_json")?)?;
        let model = ArpgModel::init(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        *out = Box::into_raw(Box::new(ArpgHandle { model }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn arpg_model_save(model: *const ArpgHandle, path: *const c_char) -> ArpgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.model.save(Path::new(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn arpg_model_free(model: *mut ArpgHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn arpg_model_info(model: *const ArpgHandle, out: *mut ArpgModelInfo) -> ArpgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = m.model.config();
        *out = ArpgModelInfo {
            vocab_size: c.vocab_size,
            num_classes: c.num_classes,
            grid_height: c.grid_height,
            grid_width: c.grid_width,
            hidden: c.hidden,
            num_parameters: m.model.num_parameters(),
        };
        Ok(())
    })
}

/// Default decode options.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn arpg_decode_options_default(out: *mut ArpgDecodeOptions) -> ArpgStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = DecodeConfig::default();
        *out = ArpgDecodeOptions {
            steps: d.steps,
            schedule: ArpgSchedule::Arccos,
            pattern: ArpgPattern::BlockCausal,
            order: ArpgOrder::Random,
            cfg_scale: d.cfg_scale,
            cfg_constant: 0,
            temperature: d.temperature,
            top_k: 0,
            top_p: d.top_p,
            seed: d.seed,
        };
        Ok(())
    })
}

/// Generates one grid per class id into `out_tokens`
/// (`batch × height × width` entries). A class id equal to the number of
/// classes selects the null condition.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn arpg_generate(
    model: *const ArpgHandle,
    classes: *const u32,
    batch: usize,
    options: *const ArpgDecodeOptions,
    out_tokens: *mut u32,
    out_len: usize,
) -> ArpgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let opts = options.as_ref().ok_or_else(|| null("options"))?;
        let classes: Vec<usize> = slice(classes, batch, "classes")?.iter().map(|&c| c as usize).collect();
        let out = slice_mut(out_tokens, out_len, "out_tokens")?;
        let c = m.model.config();
        if out.len() < batch * c.seq_len() {
            return Err(Failure(
                ArpgStatus::BufferTooSmall,
                format!("output holds {} tokens, {} needed", out.len(), batch * c.seq_len()),
            ));
        }
        let result = GenerationState::new(&m.model, &classes, c.grid_height, c.grid_width, &[], &decode_config(opts))?
            .finish()?;
        copy_tokens(&result.grids, out)
    })
}

/// Fills the cells of a `height × width` grid whose `known` flag is 0;
/// known cells are copied unchanged.
///
/// # Safety
/// `tokens`, `known` and `out_tokens` must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn arpg_inpaint(
    model: *const ArpgHandle,
    tokens: *const u32,
    known: *const u8,
    len: usize,
    class_id: u32,
    options: *const ArpgDecodeOptions,
    out_tokens: *mut u32,
) -> ArpgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let opts = options.as_ref().ok_or_else(|| null("options"))?;
        let c = m.model.config();
        if len != c.seq_len() {
            return Err(Failure(
                ArpgStatus::Dimension,
                format!("grid of {len} cells, model expects {}", c.seq_len()),
            ));
        }
        let toks: Vec<usize> = slice(tokens, len, "tokens")?.iter().map(|&t| t as usize).collect();
        let known: Vec<bool> = slice(known, len, "known")?.iter().map(|&k| k != 0).collect();
        let out = slice_mut(out_tokens, len, "out_tokens")?;
        let partial = TokenGrid::new(c.grid_height, c.grid_width, toks, class_id as usize)?;
        let result = inpaint(&m.model, &partial, &known, &decode_config(opts))?;
        copy_tokens(&result.grids, out)
    })
}

/// Tokens decoded per step for `total` tokens over `steps` steps.
///
/// # Safety
/// `out` must hold `out_len ≥ steps` entries.
#[no_mangle]
pub unsafe extern "C" fn arpg_schedule_counts(
    schedule: ArpgSchedule,
    steps: usize,
    total: usize,
    out: *mut usize,
    out_len: usize,
) -> ArpgStatus {
    guard(|| {
        let kind = match schedule {
            ArpgSchedule::Arccos => ScheduleKind::Arccos,
            ArpgSchedule::Cosine => ScheduleKind::Cosine,
            ArpgSchedule::Uniform => ScheduleKind::Uniform,
        };
        let counts = schedule_counts(&DecodeSchedule::new(kind, steps, total))?;
        let out = slice_mut(out, out_len, "out")?;
        if out.len() < counts.len() {
            return Err(Failure(
                ArpgStatus::BufferTooSmall,
                format!("output holds {} counts, {} needed", out.len(), counts.len()),
            ));
        }
        out[..counts.len()].copy_from_slice(&counts);
        Ok(())
    })
}

/// Parameter count of a JSON model configuration with a shared or
/// per-layer key/value projection.
///
/// # Safety
/// `config_json` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn arpg_param_count(config_json: *const c_char, shared_kv: u8, out: *mut u64) -> ArpgStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let config = model_config(c_str(config_json, "config_json")?)?;
        *out = param_count(&config, shared_kv != 0) as u64;
        Ok(())
    })
}
