//! C ABI over `dhub-core`.
//!
//! Every function returns a [`DhStatus`]; on failure a description is kept
//! per thread and read with [`dh_last_error_message`]. Objects are opaque
//! handles released with their `_free` function. Strings returned as
//! `char *` are owned by the caller and released with [`dh_string_free`].
//!
//! Output buffers follow one convention: the caller passes capacity, the
//! library always writes the required length to `*out_len`, and returns
//! `DH_ERR_BUFFER_TOO_SMALL` without writing when capacity is short.

#![allow(clippy::missing_safety_doc, non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bytes::Bytes;
use dhub_core::clocksync::{sample_offset, ClockError, ClockEstimator, OffsetEstimate, SyncSample};
use dhub_core::codec::{CodecError, CodecRegistry};
use dhub_core::record::{verify, RecordError, Recording};
use dhub_core::types::{payload_size, validate_session_config, Frame, SessionConfig, StreamDescriptor};
use dhub_core::wire::{self, DecodeError, FrameMessage, Message};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhStatus {
    DH_OK = 0,
    DH_ERR_NULL = 1,
    DH_ERR_INVALID_ARG = 2,
    DH_ERR_BUFFER_TOO_SMALL = 3,
    /// More input is needed; `*out_len` holds the total length required.
    DH_ERR_TRUNCATED = 4,
    DH_ERR_DECODE = 5,
    DH_ERR_CODEC = 6,
    DH_ERR_IO = 7,
    DH_ERR_NOT_FOUND = 8,
    DH_ERR_PARTIAL = 9,
    DH_ERR_CORRUPT = 10,
    DH_ERR_INVALID_CONFIG = 11,
    DH_ERR_NO_SYNC = 12,
    DH_ERR_PANIC = 99,
}

use DhStatus::*;

/// Fixed header fields of a FRAME message or a recorded frame.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DhFrameHeader {
    pub stream_id: u32,
    pub seq: u64,
    pub capture_ts_ns: u64,
    pub session_ts_ns: u64,
    pub flags: u16,
    pub codec_id: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DhOffsetEstimate {
    pub offset_ns: i64,
    pub rtt_ns: u64,
    pub sample_count: u32,
    pub dispersion_ns: u64,
}

impl From<OffsetEstimate> for DhOffsetEstimate {
    fn from(e: OffsetEstimate) -> Self {
        DhOffsetEstimate {
            offset_ns: e.offset_ns,
            rtt_ns: e.rtt_ns,
            sample_count: e.sample_count,
            dispersion_ns: e.dispersion_ns,
        }
    }
}

/// Opaque clock-offset estimator.
pub struct DhClockEstimator(ClockEstimator);

/// Opaque handle to a finalized recording.
pub struct DhRecording(Recording);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn fail(status: DhStatus, msg: impl Into<String>) -> DhStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `DH_ERR_PANIC`.
fn guard(f: impl FnOnce() -> DhStatus) -> DhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == DH_OK {
                set_error("");
            }
            s
        }
        Err(_) => fail(DH_ERR_PANIC, "internal panic"),
    }
}

unsafe fn slice<'a>(p: *const u8, len: usize) -> Option<&'a [u8]> {
    if len == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(p, len))
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, DhStatus> {
    if p.is_null() {
        return Err(fail(DH_ERR_NULL, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(DH_ERR_INVALID_ARG, "string is not UTF-8"))
}

/// Copies `data` into the caller's buffer per the capacity convention.
unsafe fn write_out(data: &[u8], out: *mut u8, cap: usize, out_len: *mut usize) -> DhStatus {
    if out_len.is_null() {
        return fail(DH_ERR_NULL, "out_len is null");
    }
    *out_len = data.len();
    if data.len() > cap {
        return fail(DH_ERR_BUFFER_TOO_SMALL, format!("{} bytes needed, {cap} available", data.len()));
    }
    if !data.is_empty() {
        if out.is_null() {
            return fail(DH_ERR_NULL, "output buffer is null");
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    DH_OK
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

fn codec_status(e: &CodecError) -> DhStatus {
    match e {
        CodecError::UnknownCodec(_) | CodecError::IdTaken(_) | CodecError::ReservedId(_) => DH_ERR_INVALID_ARG,
        _ => DH_ERR_CODEC,
    }
}

fn record_status(e: &RecordError) -> DhStatus {
    match e {
        RecordError::NotFound(_) => DH_ERR_NOT_FOUND,
        RecordError::Partial(_) => DH_ERR_PARTIAL,
        RecordError::CrcMismatch { .. } | RecordError::Corrupt(_) | RecordError::BadManifest(_) => DH_ERR_CORRUPT,
        RecordError::Codec(_) => DH_ERR_CODEC,
        RecordError::UnknownStream(_) => DH_ERR_NOT_FOUND,
        _ => DH_ERR_IO,
    }
}

// ---- general ----

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Description of the last failure on this thread; empty after a success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn dh_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn dh_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- types and config ----

/// Payload size in bytes of an uncompressed frame for a stream descriptor
/// given as JSON.
#[no_mangle]
pub unsafe extern "C" fn dh_payload_size(descriptor_json: *const c_char, out_size: *mut usize) -> DhStatus {
    guard(|| {
        let text = match str_arg(descriptor_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out_size.is_null() {
            return fail(DH_ERR_NULL, "out_size is null");
        }
        match serde_json::from_str::<StreamDescriptor>(text) {
            Ok(d) => {
                *out_size = payload_size(&d);
                DH_OK
            }
            Err(e) => fail(DH_ERR_INVALID_ARG, e.to_string()),
        }
    })
}

/// Validates a session configuration. On `DH_ERR_INVALID_CONFIG`,
/// `*violations_json` (if non-null) receives a JSON array of violations.
#[no_mangle]
pub unsafe extern "C" fn dh_validate_session_config(
    config_json: *const c_char,
    violations_json: *mut *mut c_char,
) -> DhStatus {
    guard(|| {
        if !violations_json.is_null() {
            *violations_json = ptr::null_mut();
        }
        let text = match str_arg(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg: SessionConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(DH_ERR_INVALID_ARG, e.to_string()),
        };
        match validate_session_config(&cfg) {
            Ok(()) => DH_OK,
            Err(v) => {
                if !violations_json.is_null() {
                    *violations_json = into_c_string(serde_json::to_string(&v).unwrap_or_default());
                }
                fail(DH_ERR_INVALID_CONFIG, format!("{} violation(s)", v.len()))
            }
        }
    })
}

// ---- codecs ----

/// Encodes with a built-in codec (RAW = 0, DRLE = 1).
#[no_mangle]
pub unsafe extern "C" fn dh_codec_encode(
    codec_id: u8,
    input: *const u8,
    input_len: usize,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> DhStatus {
    guard(|| {
        let Some(inp) = slice(input, input_len) else { return fail(DH_ERR_NULL, "input is null") };
        match CodecRegistry::new().encode(codec_id, inp) {
            Ok(enc) => write_out(&enc, out, out_cap, out_len),
            Err(e) => fail(codec_status(&e), e.to_string()),
        }
    })
}

/// Decodes with a built-in codec; `expected_len` is the raw payload size.
#[no_mangle]
pub unsafe extern "C" fn dh_codec_decode(
    codec_id: u8,
    input: *const u8,
    input_len: usize,
    expected_len: usize,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> DhStatus {
    guard(|| {
        let Some(inp) = slice(input, input_len) else { return fail(DH_ERR_NULL, "input is null") };
        match CodecRegistry::new().decode(codec_id, inp, expected_len) {
            Ok(dec) => write_out(&dec, out, out_cap, out_len),
            Err(e) => fail(codec_status(&e), e.to_string()),
        }
    })
}

// ---- wire ----

#[no_mangle]
pub unsafe extern "C" fn dh_crc32c(data: *const u8, len: usize) -> u32 {
    match slice(data, len) {
        Some(d) => crc32c::crc32c(d),
        None => 0,
    }
}

fn decode_status(e: &DecodeError) -> DhStatus {
    match e {
        DecodeError::Truncated { .. } => DH_ERR_TRUNCATED,
        _ => DH_ERR_DECODE,
    }
}

/// Checks the message at the start of `buf`. On success `*msg_type` is the
/// type byte and `*out_len` the full message length; on
/// `DH_ERR_TRUNCATED`, `*out_len` is the length needed so far.
#[no_mangle]
pub unsafe extern "C" fn dh_wire_peek(
    buf: *const u8,
    len: usize,
    msg_type: *mut u8,
    out_len: *mut usize,
) -> DhStatus {
    guard(|| {
        let Some(b) = slice(buf, len) else { return fail(DH_ERR_NULL, "buf is null") };
        if msg_type.is_null() || out_len.is_null() {
            return fail(DH_ERR_NULL, "null output");
        }
        match wire::decode_message(b) {
            Ok((m, total)) => {
                *msg_type = m.message_type() as u8;
                *out_len = total;
                DH_OK
            }
            Err(e) => {
                if let DecodeError::Truncated { needed } = e {
                    *out_len = needed;
                }
                fail(decode_status(&e), e.to_string())
            }
        }
    })
}

/// Encodes a FRAME message.
#[no_mangle]
pub unsafe extern "C" fn dh_wire_encode_frame(
    header: *const DhFrameHeader,
    payload: *const u8,
    payload_len: usize,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> DhStatus {
    guard(|| {
        if header.is_null() {
            return fail(DH_ERR_NULL, "header is null");
        }
        let Some(p) = slice(payload, payload_len) else { return fail(DH_ERR_NULL, "payload is null") };
        let h = *header;
        let msg = Message::Frame(FrameMessage {
            flags: h.flags,
            frame: Frame {
                stream_id: h.stream_id,
                seq: h.seq,
                capture_ts_ns: h.capture_ts_ns,
                session_ts_ns: h.session_ts_ns,
                codec_id: h.codec_id,
                payload: Bytes::copy_from_slice(p),
            },
        });
        match wire::encode_message(&msg) {
            Ok(bytes) => write_out(&bytes, out, out_cap, out_len),
            Err(e) => fail(DH_ERR_INVALID_ARG, e.to_string()),
        }
    })
}

/// Encodes a PING carrying `nonce`.
#[no_mangle]
pub unsafe extern "C" fn dh_wire_encode_ping(nonce: u64, out: *mut u8, out_cap: usize, out_len: *mut usize) -> DhStatus {
    guard(|| match wire::encode_message(&Message::Ping(nonce)) {
        Ok(bytes) => write_out(&bytes, out, out_cap, out_len),
        Err(e) => fail(DH_ERR_INVALID_ARG, e.to_string()),
    })
}

/// Decodes a FRAME message at the start of `buf`. `*payload` points into
/// `buf`; `*consumed` is the message length.
#[no_mangle]
pub unsafe extern "C" fn dh_wire_decode_frame(
    buf: *const u8,
    len: usize,
    header: *mut DhFrameHeader,
    payload: *mut *const u8,
    payload_len: *mut usize,
    consumed: *mut usize,
) -> DhStatus {
    guard(|| {
        let Some(b) = slice(buf, len) else { return fail(DH_ERR_NULL, "buf is null") };
        if header.is_null() || payload.is_null() || payload_len.is_null() || consumed.is_null() {
            return fail(DH_ERR_NULL, "null output");
        }
        match wire::decode_message(b) {
            Ok((Message::Frame(fm), total)) => {
                let f = &fm.frame;
                *header = DhFrameHeader {
                    stream_id: f.stream_id,
                    seq: f.seq,
                    capture_ts_ns: f.capture_ts_ns,
                    session_ts_ns: f.session_ts_ns,
                    flags: fm.flags,
                    codec_id: f.codec_id,
                };
                // the payload is the tail of the message body, before the CRC
                let start = total - wire::CRC_LEN - f.payload.len();
                *payload = b.as_ptr().add(start);
                *payload_len = f.payload.len();
                *consumed = total;
                DH_OK
            }
            Ok((m, _)) => fail(DH_ERR_INVALID_ARG, format!("not a FRAME message: {:?}", m.message_type())),
            Err(e) => {
                if let DecodeError::Truncated { needed } = e {
                    *consumed = needed;
                }
                fail(decode_status(&e), e.to_string())
            }
        }
    })
}

// ---- clock sync ----

/// Offset and round-trip time of one exchange.
#[no_mangle]
pub unsafe extern "C" fn dh_clock_sample_offset(
    t1: u64,
    t2: u64,
    t3: u64,
    t4: u64,
    offset_ns: *mut i64,
    rtt_ns: *mut u64,
) -> DhStatus {
    guard(|| {
        if offset_ns.is_null() || rtt_ns.is_null() {
            return fail(DH_ERR_NULL, "null output");
        }
        match sample_offset(&SyncSample { t1, t2, t3, t4 }) {
            Ok((o, r)) => {
                *offset_ns = o;
                *rtt_ns = r;
                DH_OK
            }
            Err(e) => fail(DH_ERR_INVALID_ARG, e.to_string()),
        }
    })
}

/// Creates an estimator over the last `window` samples (0 selects the default).
#[no_mangle]
pub extern "C" fn dh_clock_estimator_new(window: usize) -> *mut DhClockEstimator {
    let w = if window == 0 { dhub_core::clocksync::DEFAULT_WINDOW } else { window };
    Box::into_raw(Box::new(DhClockEstimator(ClockEstimator::new(w))))
}

#[no_mangle]
pub unsafe extern "C" fn dh_clock_estimator_free(est: *mut DhClockEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Adds a sample. `*out` receives the current estimate when one exists.
#[no_mangle]
pub unsafe extern "C" fn dh_clock_estimator_push(
    est: *mut DhClockEstimator,
    t1: u64,
    t2: u64,
    t3: u64,
    t4: u64,
    out: *mut DhOffsetEstimate,
) -> DhStatus {
    guard(|| {
        if est.is_null() || out.is_null() {
            return fail(DH_ERR_NULL, "null argument");
        }
        let sample = SyncSample { t1, t2, t3, t4 };
        if let Err(e) = sample_offset(&sample) {
            return fail(DH_ERR_INVALID_ARG, e.to_string());
        }
        match (*est).0.push(sample) {
            Some(e) => {
                *out = e.into();
                DH_OK
            }
            None => fail(DH_ERR_NO_SYNC, ClockError::NoSync.to_string()),
        }
    })
}

// ---- recordings ----

#[no_mangle]
pub unsafe extern "C" fn dh_recording_open(path: *const c_char, out: *mut *mut DhRecording) -> DhStatus {
    guard(|| {
        if out.is_null() {
            return fail(DH_ERR_NULL, "out is null");
        }
        *out = ptr::null_mut();
        let p = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Recording::open(Path::new(p)) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(DhRecording(r)));
                DH_OK
            }
            Err(e) => fail(record_status(&e), e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn dh_recording_free(rec: *mut DhRecording) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// The manifest as JSON; release with `dh_string_free`.
#[no_mangle]
pub unsafe extern "C" fn dh_recording_manifest_json(rec: *const DhRecording, out: *mut *mut c_char) -> DhStatus {
    guard(|| {
        if rec.is_null() || out.is_null() {
            return fail(DH_ERR_NULL, "null argument");
        }
        *out = into_c_string(serde_json::to_string(&(*rec).0.manifest()).unwrap_or_default());
        DH_OK
    })
}

#[no_mangle]
pub unsafe extern "C" fn dh_recording_frame_count(rec: *const DhRecording, stream_id: u32, out: *mut u64) -> DhStatus {
    guard(|| {
        if rec.is_null() || out.is_null() {
            return fail(DH_ERR_NULL, "null argument");
        }
        match (*rec).0.index(stream_id) {
            Ok(ix) => {
                *out = ix.len() as u64;
                DH_OK
            }
            Err(e) => fail(record_status(&e), e.to_string()),
        }
    })
}

/// Reads and decodes the `index`-th frame (in session-time order) of a
/// stream into `out`.
#[no_mangle]
pub unsafe extern "C" fn dh_recording_read_frame(
    rec: *const DhRecording,
    stream_id: u32,
    index: u64,
    header: *mut DhFrameHeader,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> DhStatus {
    guard(|| {
        if rec.is_null() || header.is_null() {
            return fail(DH_ERR_NULL, "null argument");
        }
        let r = &(*rec).0;
        let ix = match r.index(stream_id) {
            Ok(ix) => ix,
            Err(e) => return fail(record_status(&e), e.to_string()),
        };
        let Some(entry) = usize::try_from(index).ok().and_then(|i| ix.get(i)) else {
            return fail(DH_ERR_INVALID_ARG, format!("frame index {index} out of range ({} frames)", ix.len()));
        };
        match r.read_entry(stream_id, entry) {
            Ok(f) => {
                *header = DhFrameHeader {
                    stream_id: f.stream_id,
                    seq: f.seq,
                    capture_ts_ns: f.capture_ts_ns,
                    session_ts_ns: f.session_ts_ns,
                    flags: wire::FLAG_SESSION_TS_VALID,
                    codec_id: f.codec_id,
                };
                write_out(&f.payload, out, out_cap, out_len)
            }
            Err(e) => fail(record_status(&e), e.to_string()),
        }
    })
}

/// Verifies a recording directory. `*report_json` receives the report;
/// `*clean` is 1 when there are no findings.
#[no_mangle]
pub unsafe extern "C" fn dh_recording_verify(
    path: *const c_char,
    report_json: *mut *mut c_char,
    clean: *mut i32,
) -> DhStatus {
    guard(|| {
        if report_json.is_null() || clean.is_null() {
            return fail(DH_ERR_NULL, "null output");
        }
        let p = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let root = Path::new(p);
        if !root.is_dir() {
            return fail(DH_ERR_NOT_FOUND, format!("{p}: not a directory"));
        }
        let report = verify(root);
        *clean = i32::from(report.is_clean());
        *report_json = into_c_string(serde_json::to_string(&report).unwrap_or_default());
        DH_OK
    })
}
