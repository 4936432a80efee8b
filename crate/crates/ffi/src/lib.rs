// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over `transcirc`: load a model, read END logits, score one path
//! patch, run a KS test and identify a steering direction.
//!
//! Every function returns a [`TcStatus`]. On failure the message is kept in
//! thread-local storage and can be copied out with
//! [`tc_last_error_message`]. Models are opaque handles released with
//! [`tc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use transcirc::analysis::ks_two_sample;
use transcirc::corpus::{Direction, PromptPair, TokenType};
use transcirc::model::{ComponentId, Model};
use transcirc::numerics::Matrix;
use transcirc::patching::{standard_patch_score, subspace_patch_score, PatchingConfig};
use transcirc::subspace::{identify_with, ContrastiveMatrix, IdentifyOptions};
use transcirc::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    NonFinite = 6,
    Degenerate = 7,
    Missing = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Internal = 11,
}

/// Opaque model handle.
pub struct TcModel {
    model: Model,
}

/// Shape of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TcModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TcStatus {
    match e {
        Error::NonFinite { .. } => TcStatus::NonFinite,
        Error::DimensionMismatch { .. } => TcStatus::DimensionMismatch,
        Error::ZeroVector(_) | Error::Degenerate(_) => TcStatus::Degenerate,
        Error::InvalidArgument(_) | Error::Config(_) => TcStatus::InvalidArgument,
        Error::Missing(_) => TcStatus::Missing,
        Error::Format { .. } | Error::Json(_) => TcStatus::Format,
        Error::Io(_) => TcStatus::Io,
        _ => TcStatus::Internal,
    }
}

struct Fail(TcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TcStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside transcirc".into());
            TcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TcStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn model_ref<'a>(m: *const TcModel) -> Result<&'a Model, Fail> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to `len`) into `buf`. Returns the full message length plus one,
/// so a caller can size its buffer.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn tc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a model file. On success `*out` owns a handle for [`tc_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tc_model_load(path: *const c_char, out: *mut *mut TcModel) -> TcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(TcStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = Model::load(p)?;
        *out = Box::into_raw(Box::new(TcModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`tc_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn tc_model_free(model: *mut TcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tc_model_config(model: *const TcModel, out: *mut TcModelConfig) -> TcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = m.config();
        *out = TcModelConfig {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            d_head: c.d_head,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            max_seq: c.max_seq,
            seed: c.seed,
        };
        Ok(())
    })
}

/// Writes the END-position logits (`vocab_size` values) of `tokens`.
///
/// # Safety
/// `tokens` valid for `n_tokens` reads, `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn tc_model_end_logits(
    model: *const TcModel,
    tokens: *const u32,
    n_tokens: usize,
    out: *mut f64,
    out_len: usize,
) -> TcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let toks = slice(tokens, n_tokens, "tokens")?;
        let v = m.config().vocab_size;
        if out_len < v {
            return Err(Fail(
                TcStatus::BufferTooSmall,
                format!("output holds {out_len} values, {v} needed"),
            ));
        }
        let logits = m.end_logits(&[toks], &[])?;
        slice_mut(out, out_len, "out")?[..v].copy_from_slice(&logits[0]);
        Ok(())
    })
}

/// Path-patching score of one sender on one prompt pair.
///
/// `head < 0` selects the layer's MLP. With `basis_cols == 0` the sender is
/// fully replaced by its counterfactual activation; otherwise `basis` is a
/// row-major `d_model × basis_cols` orthonormal basis and only that subspace
/// is patched. `*out_flagged` is set to 1 when the clean target logit was at
/// or below `epsilon`.
///
/// # Safety
/// Pointers valid for the stated lengths; outputs valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tc_patch_score(
    model: *const TcModel,
    positive: *const u32,
    negative: *const u32,
    n_tokens: usize,
    target: u32,
    layer: usize,
    head: i32,
    basis: *const f64,
    basis_cols: usize,
    epsilon: f64,
    out_delta: *mut f64,
    out_flagged: *mut i32,
) -> TcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let pos = slice(positive, n_tokens, "positive")?;
        let neg = slice(negative, n_tokens, "negative")?;
        if n_tokens == 0 {
            return Err(Fail(TcStatus::InvalidArgument, "empty prompt".into()));
        }
        let component = if head < 0 {
            ComponentId::mlp(layer)
        } else {
            ComponentId::head(layer, head as usize)
        };
        component.validate(m.config())?;
        let pair = PromptPair {
            positive: pos.to_vec(),
            negative: neg.to_vec(),
            target,
            token_types: vec![TokenType::Other; n_tokens],
            direction: Direction::new(0, 1),
            template_id: 0,
            entry: 0,
            held_out: false,
        };
        let config = PatchingConfig {
            epsilon,
            ..PatchingConfig::default()
        };
        config.validate()?;
        let score = if basis_cols == 0 {
            standard_patch_score(m, &pair, component, &config)?
        } else {
            let d = m.config().d_model;
            let data = slice(basis, d * basis_cols, "basis")?;
            let w = Matrix::new(d, basis_cols, data.to_vec())?;
            subspace_patch_score(m, &pair, component, &w, &config)?
        };
        *out_delta.as_mut().ok_or_else(|| null("out_delta"))? = score.delta;
        if let Some(f) = out_flagged.as_mut() {
            *f = score.flagged as i32;
        }
        Ok(())
    })
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
///
/// # Safety
/// `a`, `b` valid for their lengths; outputs valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tc_ks_two_sample(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    out_statistic: *mut f64,
    out_p_value: *mut f64,
) -> TcStatus {
    guard(|| {
        let r = ks_two_sample(slice(a, n_a, "a")?, slice(b, n_b, "b")?)?;
        *out_statistic.as_mut().ok_or_else(|| null("out_statistic"))? = r.statistic;
        *out_p_value.as_mut().ok_or_else(|| null("out_p_value"))? = r.p_value;
        Ok(())
    })
}

/// Steering direction of a row-major `d × n` contrastive matrix (one column
/// per prompt pair) with an `r`-dimensional specific subspace. Writes the
/// unit direction (`d` values) to `out`.
///
/// # Safety
/// `m` valid for `d·n` reads, `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn tc_identify_direction(
    m: *const f64,
    d: usize,
    n: usize,
    r: usize,
    out: *mut f64,
    out_len: usize,
) -> TcStatus {
    guard(|| {
        if out_len < d {
            return Err(Fail(
                TcStatus::BufferTooSmall,
                format!("output holds {out_len} values, {d} needed"),
            ));
        }
        let data = slice(m, d * n, "m")?;
        let cm = ContrastiveMatrix {
            component: ComponentId::Embedding,
            m: Matrix::new(d, n, data.to_vec())?,
        };
        let opts = IdentifyOptions {
            r,
            ..IdentifyOptions::default()
        };
        let sub = identify_with(&cm, &opts)?;
        slice_mut(out, out_len, "out")?[..d].copy_from_slice(sub.s.as_slice());
        Ok(())
    })
}
