//! C ABI over the `advnmt` models.
//!
//! Conventions:
//! - Every fallible function returns an [`AnmtStatus`]; results come back
//!   through out-pointers that are written only on success. The one
//!   exception is the required length reported with
//!   `ANMT_STATUS_BUFFER_TOO_SMALL`.
//! - Models are opaque handles created by `*_new`/`*_load` and released
//!   with the matching `*_free`.
//! - The message of the last failure on the calling thread is available
//!   from [`anmt_last_error`].
//! - Panics never cross the boundary; they surface as `ANMT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use advnmt::adversary::Adversary;
use advnmt::data::TokenId;
use advnmt::decode_eval::{beam_decode, corpus_bleu};
use advnmt::generator::{Generator, GeneratorConfig};
use advnmt::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnmtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    DimMismatch = 5,
    TokenOutOfRange = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Internal = 9,
}

/// Opaque generator handle.
pub struct AnmtGenerator(Generator);

/// Opaque adversary handle.
pub struct AnmtAdversary(Adversary);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AnmtStatus {
    match e {
        Error::Io { .. } => AnmtStatus::Io,
        Error::Checkpoint(_) => AnmtStatus::Checkpoint,
        Error::DimMismatch { .. } => AnmtStatus::DimMismatch,
        Error::TokenOutOfRange { .. } => AnmtStatus::TokenOutOfRange,
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Empty(_)
        | Error::InvalidRange { .. }
        | Error::LineCountMismatch { .. } => AnmtStatus::InvalidArgument,
        _ => AnmtStatus::Internal,
    }
}

struct Fail(AnmtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AnmtStatus::NullArgument, format!("`{what}` is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AnmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AnmtStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            AnmtStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(AnmtStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn tokens<'a>(p: *const u32, len: usize, what: &str) -> Result<&'a [TokenId], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn out<T>(p: *mut T, what: &str) -> Result<*mut T, Fail> {
    if p.is_null() {
        Err(null(what))
    } else {
        Ok(p)
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn anmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn anmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Freshly initialized generator.
///
/// # Safety
/// `out_handle` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn anmt_generator_new(
    src_vocab: usize,
    tgt_vocab: usize,
    emb_dim: usize,
    hidden_dim: usize,
    seed: u64,
    out_handle: *mut *mut AnmtGenerator,
) -> AnmtStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let g = Generator::new(GeneratorConfig::new(src_vocab, tgt_vocab, emb_dim, hidden_dim), seed)?;
        *slot = Box::into_raw(Box::new(AnmtGenerator(g)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_handle` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn anmt_generator_load(path: *const c_char, out_handle: *mut *mut AnmtGenerator) -> AnmtStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let g = Generator::load(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(AnmtGenerator(g)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn anmt_generator_save(handle: *const AnmtGenerator, path: *const c_char) -> AnmtStatus {
    guard(|| {
        let g = handle_ref(handle)?;
        g.0.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

unsafe fn handle_ref<'a>(h: *const AnmtGenerator) -> Result<&'a AnmtGenerator, Fail> {
    borrow(h, "generator")
}

/// Releases a generator. Null is a no-op.
///
/// # Safety
/// `handle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn anmt_generator_free(handle: *mut AnmtGenerator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// `log G(target | source)`; the target is scored as given (append EOS to
/// score a complete sentence).
///
/// # Safety
/// Token pointers must reference `*_len` readable ids; `out_log_prob` must
/// be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn anmt_generator_score(
    handle: *const AnmtGenerator,
    source: *const u32,
    source_len: usize,
    target: *const u32,
    target_len: usize,
    out_log_prob: *mut f64,
) -> AnmtStatus {
    guard(|| {
        let g = handle_ref(handle)?;
        let slot = out(out_log_prob, "out_log_prob")?;
        let lp = g.0.score(tokens(source, source_len, "source")?, tokens(target, target_len, "target")?)?;
        *slot = lp;
        Ok(())
    })
}

/// Beam-decodes `source` (greedy for `beam == 1`). Writes the output ids,
/// ending in EOS when finished, into `out_tokens`.
///
/// `*out_len` always receives the output length. If it exceeds `capacity`
/// nothing is copied and `ANMT_STATUS_BUFFER_TOO_SMALL` is returned, so callers
/// can retry with a larger buffer.
///
/// # Safety
/// `out_tokens` must hold `capacity` writable ids (may be null when
/// `capacity == 0`); `out_len` must be valid; `out_score` may be null.
#[no_mangle]
pub unsafe extern "C" fn anmt_generator_translate(
    handle: *const AnmtGenerator,
    source: *const u32,
    source_len: usize,
    beam: usize,
    max_len: usize,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
    out_score: *mut f64,
) -> AnmtStatus {
    guard(|| {
        let g = handle_ref(handle)?;
        let len_slot = out(out_len, "out_len")?;
        let hyp = beam_decode(&g.0, tokens(source, source_len, "source")?, beam, max_len)?;
        *len_slot = hyp.tokens.len();
        if hyp.tokens.len() > capacity {
            return Err(Fail(
                AnmtStatus::BufferTooSmall,
                format!("output has {} tokens, buffer holds {capacity}", hyp.tokens.len()),
            ));
        }
        if !hyp.tokens.is_empty() {
            let dst = out(out_tokens, "out_tokens")?;
            ptr::copy_nonoverlapping(hyp.tokens.as_ptr(), dst, hyp.tokens.len());
        }
        if !out_score.is_null() {
            *out_score = hyp.score;
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out_handle` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn anmt_adversary_load(path: *const c_char, out_handle: *mut *mut AnmtAdversary) -> AnmtStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let d = Adversary::load(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(AnmtAdversary(d)));
        Ok(())
    })
}

/// Releases an adversary. Null is a no-op.
///
/// # Safety
/// `handle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn anmt_adversary_free(handle: *mut AnmtAdversary) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Eval-mode probability that `(source, target)` is a human translation.
///
/// # Safety
/// Token pointers must reference `*_len` readable ids; `out_prob` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn anmt_adversary_score(
    handle: *const AnmtAdversary,
    source: *const u32,
    source_len: usize,
    target: *const u32,
    target_len: usize,
    out_prob: *mut f64,
) -> AnmtStatus {
    guard(|| {
        let d = borrow(handle, "adversary")?;
        let slot = out(out_prob, "out_prob")?;
        *slot = d.0.score(tokens(source, source_len, "source")?, tokens(target, target_len, "target")?)?;
        Ok(())
    })
}

/// Unsmoothed 4-gram corpus BLEU (percent) over `count` sentence pairs of
/// token ids.
///
/// # Safety
/// `hyps`/`refs` must point to `count` id arrays whose lengths are given by
/// `hyp_lens`/`ref_lens`; `out_bleu` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn anmt_corpus_bleu(
    hyps: *const *const u32,
    hyp_lens: *const usize,
    refs: *const *const u32,
    ref_lens: *const usize,
    count: usize,
    out_bleu: *mut f64,
) -> AnmtStatus {
    guard(|| {
        let slot = out(out_bleu, "out_bleu")?;
        if count == 0 {
            return Err(Fail(AnmtStatus::InvalidArgument, "empty corpus".into()));
        }
        if hyps.is_null() || hyp_lens.is_null() || refs.is_null() || ref_lens.is_null() {
            return Err(null("sentence arrays"));
        }
        let gather = |ptrs: *const *const u32, lens: *const usize, what: &str| -> Result<Vec<&[u32]>, Fail> {
            (0..count)
                .map(|i| tokens(*ptrs.add(i), *lens.add(i), what))
                .collect()
        };
        let h = gather(hyps, hyp_lens, "hypothesis")?;
        let r = gather(refs, ref_lens, "reference")?;
        *slot = corpus_bleu(&h, &r)?.bleu;
        Ok(())
    })
}
