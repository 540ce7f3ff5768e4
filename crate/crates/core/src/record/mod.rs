//! Chunked on-disk session recordings.
//!
//! ```text
//! <session>/manifest.json            written at finalize
//! <session>/.partial                 present until finalize (header JSON)
//! <session>/streams/<id>/chunk-NNNNNN.dhc
//! <session>/streams/<id>/index.dhi
//! ```
//!
//! A chunk is `"DHC1" | stream_id u32 | chunk_index u32` followed by records
//! `seq u64 | capture_ts u64 | session_ts u64 | codec u8 | 0u8 | len u32 |
//! payload | crc u32`, the CRC-32C covering everything from `seq` through
//! the payload. Index entries are `session_ts u64 | chunk u32 | offset u64`,
//! one per record, sorted by session time.

mod chunk;
mod reader;
mod verify;
mod writer;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clocksync::OffsetEstimate;
use crate::codec::{CodecError, ExternalCodecSpec};
use crate::types::{AdapterType, StreamDescriptor};

pub use chunk::{decode_record_header, encode_record_header, scan_chunk, IndexEntry, RecordHeader, ScanOutcome, ScanStop, ScannedRecord};
pub use reader::{align, AlignMode, AlignedCursor, AlignedTuple, Recording, RecordedFrame};
pub use verify::{repair, verify, verify_with, Finding, FindingKind, RepairReport, StreamCheck, VerifyOptions, VerifyReport, POSE_RESIDUAL_LIMIT};
pub use writer::{ChunkLimits, FinalizeInfo, RecordingFinisher, RecordingWriter, StreamSummary, StreamWriter};

pub const FORMAT_VERSION: u32 = 1;
pub const CHUNK_MAGIC: &[u8; 4] = b"DHC1";
pub const CHUNK_HEADER_LEN: u64 = 12;
/// Record bytes besides the payload: 30 header bytes + 4 CRC bytes.
pub const RECORD_OVERHEAD: u64 = 34;
pub const RECORD_HEADER_LEN: usize = 30;
pub const INDEX_ENTRY_LEN: usize = 20;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARTIAL_MARKER: &str = ".partial";

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("WRITE_FAILED: {path}: {source}")]
    WriteFailed { path: PathBuf, source: std::io::Error },
    #[error("READ_FAILED: {path}: {source}")]
    ReadFailed { path: PathBuf, source: std::io::Error },
    #[error("SEQ_ORDER: stream {stream_id} got seq {got} after {last}")]
    SeqOrder { stream_id: u32, last: u64, got: u64 },
    #[error("UNKNOWN_STREAM: {0}")]
    UnknownStream(u32),
    #[error("CRC_MISMATCH: {chunk} at offset {offset}")]
    CrcMismatch { chunk: PathBuf, offset: u64 },
    #[error("CORRUPT: {0}")]
    Corrupt(String),
    #[error("PARTIAL: {0} has no manifest; run verify --repair")]
    Partial(PathBuf),
    #[error("NOT_FOUND: {0}")]
    NotFound(PathBuf),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("BAD_MANIFEST: {0}")]
    BadManifest(String),
}

impl RecordError {
    pub fn code(&self) -> &'static str {
        match self {
            RecordError::WriteFailed { .. } => "WRITE_FAILED",
            RecordError::ReadFailed { .. } => "READ_FAILED",
            RecordError::SeqOrder { .. } => "SEQ_ORDER",
            RecordError::UnknownStream(_) => "UNKNOWN_STREAM",
            RecordError::CrcMismatch { .. } => "CRC_MISMATCH",
            RecordError::Corrupt(_) => "CORRUPT",
            RecordError::Partial(_) => "PARTIAL",
            RecordError::NotFound(_) => "NOT_FOUND",
            RecordError::Codec(e) => e.code(),
            RecordError::BadManifest(_) => "BAD_MANIFEST",
        }
    }
}

pub(crate) fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::WriteFailed { path: path.to_path_buf(), source }
}

pub(crate) fn read_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            RecordError::NotFound(path.to_path_buf())
        } else {
            RecordError::ReadFailed { path: path.to_path_buf(), source }
        }
    }
}

/// Where a simulated stream came from, so verify can regenerate payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSource {
    pub adapter_type: AdapterType,
    pub seed: u64,
    pub fps: f64,
}

/// Per-stream setup known when the recording is opened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSetup {
    pub descriptor: StreamDescriptor,
    pub codec_id: u8,
    #[serde(default)]
    pub lossy: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated: Option<SimulatedSource>,
}

/// Contents of the `.partial` marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingHeader {
    pub format_version: u32,
    pub session_name: String,
    /// Wall-clock creation time, Unix nanoseconds.
    pub created_ts: u64,
    pub streams: Vec<StreamSetup>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub external_codecs: Vec<ExternalCodecSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub file: String,
    pub chunk_index: u32,
    pub record_count: u64,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    #[serde(flatten)]
    pub setup: StreamSetup,
    pub frame_count: u64,
    /// Encoded payload bytes.
    pub byte_count: u64,
    pub first_session_ts_ns: Option<u64>,
    pub last_session_ts_ns: Option<u64>,
    pub drop_count: u64,
    pub chunks: Vec<ChunkEntry>,
}

impl StreamManifest {
    pub fn stream_id(&self) -> u32 {
        self.setup.descriptor.stream_id
    }

    pub fn duration_s(&self) -> f64 {
        match (self.first_session_ts_ns, self.last_session_ts_ns) {
            (Some(a), Some(b)) if b > a => (b - a) as f64 / 1e9,
            _ => 0.0,
        }
    }

    /// Frames per second over the recorded span ((n - 1) intervals).
    pub fn mean_fps(&self) -> f64 {
        let d = self.duration_s();
        if d > 0.0 && self.frame_count > 1 {
            (self.frame_count - 1) as f64 / d
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub format_version: u32,
    pub session_name: String,
    pub created_ts: u64,
    pub finalized_ts: u64,
    pub streams: Vec<StreamManifest>,
    #[serde(default)]
    pub clock_estimates: BTreeMap<String, OffsetEstimate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub external_codecs: Vec<ExternalCodecSpec>,
    #[serde(default)]
    pub degraded: bool,
    #[serde(default)]
    pub repaired: bool,
}

impl RecordingManifest {
    pub fn stream(&self, stream_id: u32) -> Option<&StreamManifest> {
        self.streams.iter().find(|s| s.stream_id() == stream_id)
    }

    pub fn total_bytes(&self) -> u64 {
        self.streams.iter().map(|s| s.byte_count).sum()
    }
}

pub fn stream_dir(root: &Path, stream_id: u32) -> PathBuf {
    root.join("streams").join(stream_id.to_string())
}

pub fn chunk_file_name(chunk_index: u32) -> String {
    format!("chunk-{chunk_index:06}.dhc")
}

pub fn index_path(root: &Path, stream_id: u32) -> PathBuf {
    stream_dir(root, stream_id).join("index.dhi")
}

pub(crate) fn unix_now_ns() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

/// Lists recordings (finalized or partial) directly under `root`.
pub fn list_recordings(root: &Path) -> Vec<RecordingSummary> {
    let Ok(entries) = std::fs::read_dir(root) else {
        return Vec::new();
    };
    let mut out: Vec<RecordingSummary> = entries
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .filter_map(|e| {
            let path = e.path();
            let name = e.file_name().to_string_lossy().into_owned();
            if let Ok(text) = std::fs::read_to_string(path.join(MANIFEST_FILE)) {
                let m: RecordingManifest = serde_json::from_str(&text).ok()?;
                Some(RecordingSummary {
                    name,
                    session_name: m.session_name.clone(),
                    complete: true,
                    streams: m.streams.len(),
                    frames: m.streams.iter().map(|s| s.frame_count).sum(),
                    bytes: m.total_bytes(),
                    created_ts: m.created_ts,
                })
            } else if let Ok(text) = std::fs::read_to_string(path.join(PARTIAL_MARKER)) {
                let h: RecordingHeader = serde_json::from_str(&text).ok()?;
                Some(RecordingSummary {
                    name,
                    session_name: h.session_name,
                    complete: false,
                    streams: h.streams.len(),
                    frames: 0,
                    bytes: 0,
                    created_ts: h.created_ts,
                })
            } else {
                None
            }
        })
        .collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingSummary {
    pub name: String,
    pub session_name: String,
    pub complete: bool,
    pub streams: usize,
    pub frames: u64,
    pub bytes: u64,
    pub created_ts: u64,
}
