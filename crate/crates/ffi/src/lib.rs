//! C interface to the FSQ helpers, the codec tokenizer and the language model.
//!
//! Every function returns a [`PtStatus`]. On failure a message is kept per
//! thread and can be read with [`pt_last_error`] until the next failing call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use preftts::checkpoint::{self, LoadedLm};
use preftts::error::{Error, ErrorClass};
use preftts::fsq::{self, FsqCode, FsqLevels};
use preftts::lm::Sampling;
use preftts::rng::CounterRng;
use preftts::system::CodecSystem;
use preftts::text::InstructionText;

use candle_core::DType;

/// Marks a preference-stream slot with no token (disabled stream).
pub const PT_NO_TOKEN: u32 = u32::MAX;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Runtime = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Trained codec used to turn speech tokens into content and prompt tokens.
pub struct PtCodec {
    system: CodecSystem,
}

/// Trained language model.
pub struct PtLm {
    inner: LoadedLm,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: PtStatus, msg: impl Into<String>) -> PtStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> PtStatus {
    let status = match &e {
        Error::InvalidInput(_) | Error::InvalidCode { .. } | Error::InvalidIndex { .. } => PtStatus::InvalidArgument,
        _ => match e.class() {
            ErrorClass::Config => PtStatus::Config,
            ErrorClass::Data => PtStatus::Data,
            ErrorClass::Runtime => PtStatus::Runtime,
        },
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), PtStatus>) -> PtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PtStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(PtStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn status(self) -> Result<T, PtStatus>;
}

impl<T> OrStatus<T> for preftts::error::Result<T> {
    fn status(self) -> Result<T, PtStatus> {
        self.map_err(from_error)
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), PtStatus> {
    if p.is_null() {
        Err(fail(PtStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], PtStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], PtStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string(p: *const c_char, name: &str) -> Result<String, PtStatus> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| fail(PtStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn levels(p: *const u32, n: usize) -> Result<FsqLevels, PtStatus> {
    FsqLevels::new(slice(p, n, "levels")?.to_vec()).status()
}

unsafe fn write_stream(buf: *mut u32, cap: usize, tokens: &[Option<u32>]) {
    if buf.is_null() {
        return;
    }
    let dst = std::slice::from_raw_parts_mut(buf, cap);
    for (d, t) in dst.iter_mut().zip(tokens) {
        *d = t.unwrap_or(PT_NO_TOKEN);
    }
}

/// Message of the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn pt_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Number of codes of an FSQ codebook with `n` per-dimension levels.
///
/// # Safety
/// `levels` must point to `n` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pt_fsq_codebook_size(levels_ptr: *const u32, n: usize, out: *mut u64) -> PtStatus {
    guard(|| {
        non_null(out, "out")?;
        let l = levels(levels_ptr, n)?;
        *out = l.codebook_size();
        Ok(())
    })
}

/// Writes the `n` code digits of `index` to `code_out`.
///
/// # Safety
/// `levels` and `code_out` must each point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn pt_fsq_index_to_code(
    levels_ptr: *const u32,
    n: usize,
    index: u64,
    code_out: *mut u32,
) -> PtStatus {
    guard(|| {
        let l = levels(levels_ptr, n)?;
        let out = slice_mut(code_out, n, "code_out")?;
        let code = fsq::index_to_code(index, &l).status()?;
        out.copy_from_slice(&code.0);
        Ok(())
    })
}

/// Inverse of [`pt_fsq_index_to_code`].
///
/// # Safety
/// `levels` and `code` must each point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pt_fsq_code_to_index(
    levels_ptr: *const u32,
    n: usize,
    code: *const u32,
    out: *mut u64,
) -> PtStatus {
    guard(|| {
        non_null(out, "out")?;
        let l = levels(levels_ptr, n)?;
        let code = FsqCode(slice(code, n, "code")?.to_vec());
        *out = fsq::code_to_index(&code, &l).status()?;
        Ok(())
    })
}

/// Loads a codec checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pt_codec_load(path: *const c_char, out: *mut *mut PtCodec) -> PtStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = string(path, "path")?;
        let system = checkpoint::load_codec(Path::new(&path), DType::F32).status()?;
        *out = Box::into_raw(Box::new(PtCodec { system }));
        Ok(())
    })
}

/// # Safety
/// `codec` must come from [`pt_codec_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pt_codec_free(codec: *mut PtCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}

/// Speech vocabulary size accepted by [`pt_codec_encode`].
///
/// # Safety
/// `codec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pt_codec_speech_vocab(codec: *const PtCodec, out: *mut usize) -> PtStatus {
    guard(|| {
        non_null(codec, "codec")?;
        non_null(out, "out")?;
        *out = (*codec).system.config().codec.speech_vocab;
        Ok(())
    })
}

/// Copies the NUL-terminated hex fingerprint into `buf`. `*len` receives
/// the fingerprint length, also when the buffer is too small.
///
/// # Safety
/// `buf` must hold `cap` bytes; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pt_codec_fingerprint(
    codec: *const PtCodec,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> PtStatus {
    guard(|| {
        non_null(codec, "codec")?;
        non_null(len, "len")?;
        let fp = checkpoint::codec_fingerprint(&(*codec).system).status()?;
        *len = fp.len();
        if cap < fp.len() + 1 {
            return Err(fail(PtStatus::BufferTooSmall, format!("fingerprint needs {} bytes", fp.len() + 1)));
        }
        let out = slice_mut(buf as *mut u8, cap, "buf")?;
        out[..fp.len()].copy_from_slice(fp.as_bytes());
        out[fp.len()] = 0;
        Ok(())
    })
}

/// Encodes `len` speech tokens into one content and one prompt token per
/// frame, written to `content_out` and `prompt_out` (each `len` long).
///
/// # Safety
/// `speech`, `content_out` and `prompt_out` must each hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn pt_codec_encode(
    codec: *const PtCodec,
    speech: *const u32,
    len: usize,
    content_out: *mut u32,
    prompt_out: *mut u32,
) -> PtStatus {
    guard(|| {
        non_null(codec, "codec")?;
        if len == 0 {
            return Err(fail(PtStatus::InvalidArgument, "empty speech sequence"));
        }
        let speech = slice(speech, len, "speech")?;
        let content = slice_mut(content_out, len, "content_out")?;
        let prompt = slice_mut(prompt_out, len, "prompt_out")?;
        let out = (*codec).system.branches(&[speech], None).status()?;
        content.copy_from_slice(&out.content_ids);
        prompt.copy_from_slice(&out.prompt_ids);
        Ok(())
    })
}

/// Loads a language-model checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pt_lm_load(path: *const c_char, out: *mut *mut PtLm) -> PtStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = string(path, "path")?;
        let inner = checkpoint::load_lm(Path::new(&path), DType::F32).status()?;
        *out = Box::into_raw(Box::new(PtLm { inner }));
        Ok(())
    })
}

/// # Safety
/// `lm` must come from [`pt_lm_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pt_lm_free(lm: *mut PtLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Fails with `PT_STATUS_DATA` unless `lm` was trained on tokens of `codec`.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pt_lm_check_pairing(lm: *const PtLm, codec: *const PtCodec) -> PtStatus {
    guard(|| {
        non_null(lm, "lm")?;
        non_null(codec, "codec")?;
        checkpoint::check_pairing(&(*lm).inner, &(*codec).system).status()
    })
}

/// Greedy generation of at most `max_len` speech tokens for an instruction
/// and content text. `*out_len` receives the number of speech tokens written
/// to `speech_out`. When non-null, `content_out` and `prompt_out` receive the
/// preference tokens of each emitted speech token, or `PT_NO_TOKEN` for a
/// disabled stream. All output buffers must hold `max_len` values.
///
/// # Safety
/// Strings must be NUL-terminated; non-null buffers must hold `max_len` values.
#[no_mangle]
pub unsafe extern "C" fn pt_lm_generate(
    lm: *const PtLm,
    instruction: *const c_char,
    text: *const c_char,
    max_len: usize,
    speech_out: *mut u32,
    content_out: *mut u32,
    prompt_out: *mut u32,
    out_len: *mut usize,
) -> PtStatus {
    guard(|| {
        non_null(lm, "lm")?;
        non_null(out_len, "out_len")?;
        *out_len = 0;
        if max_len == 0 {
            return Err(fail(PtStatus::InvalidArgument, "max_len must be positive"));
        }
        let instruction = string(instruction, "instruction")?;
        let text = string(text, "text")?;
        let speech = slice_mut(speech_out, max_len, "speech_out")?;
        let mut rng = CounterRng::new(0, "ffi");
        let out = (*lm)
            .inner
            .lm
            .generate(&InstructionText::new(instruction, text), max_len, Sampling::Greedy, &mut rng)
            .status()?;
        let n = out.speech.len();
        speech[..n].copy_from_slice(&out.speech);
        let content: Vec<Option<u32>> = out.steps.iter().take(n).map(|s| s.content).collect();
        let prompt: Vec<Option<u32>> = out.steps.iter().take(n).map(|s| s.prompt).collect();
        write_stream(content_out, max_len, &content);
        write_stream(prompt_out, max_len, &prompt);
        *out_len = n;
        Ok(())
    })
}
