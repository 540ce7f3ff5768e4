use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use super::chunk::{chunk_header, encode_index, encode_record_header, record_crc, IndexEntry, RecordHeader};
use super::{
    chunk_file_name, index_path, stream_dir, unix_now_ns, write_err, ChunkEntry, RecordError, RecordingHeader,
    RecordingManifest, StreamManifest, CHUNK_HEADER_LEN, FORMAT_VERSION, MANIFEST_FILE, PARTIAL_MARKER,
    RECORD_OVERHEAD,
};
use crate::clocksync::OffsetEstimate;
use crate::types::Frame;

const WRITE_BUFFER: usize = 1 << 20;
const FLUSH_INTERVAL: Duration = Duration::from_secs(1);

/// Chunk rotation thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLimits {
    pub max_bytes: u64,
    /// Span of session time covered by one chunk.
    pub max_duration_ns: u64,
}

impl Default for ChunkLimits {
    fn default() -> Self {
        ChunkLimits { max_bytes: 256 << 20, max_duration_ns: 10_000_000_000 }
    }
}

struct OpenChunk {
    index: u32,
    path: PathBuf,
    out: BufWriter<File>,
    size: u64,
    records: u64,
    first_ts: u64,
}

/// What a finished stream writer hands to the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSummary {
    pub stream_id: u32,
    pub frame_count: u64,
    pub byte_count: u64,
    pub first_session_ts_ns: Option<u64>,
    pub last_session_ts_ns: Option<u64>,
    pub chunks: Vec<ChunkEntry>,
}

/// Appends one stream's records into rotating chunk files.
pub struct StreamWriter {
    root: PathBuf,
    stream_id: u32,
    limits: ChunkLimits,
    current: Option<OpenChunk>,
    next_chunk: u32,
    chunks: Vec<ChunkEntry>,
    index: Vec<IndexEntry>,
    last_seq: Option<u64>,
    byte_count: u64,
    first_ts: Option<u64>,
    last_ts: Option<u64>,
    last_flush: Instant,
}

impl StreamWriter {
    pub fn new(root: &Path, stream_id: u32, limits: ChunkLimits) -> Result<Self, RecordError> {
        let dir = stream_dir(root, stream_id);
        std::fs::create_dir_all(&dir).map_err(write_err(&dir))?;
        Ok(StreamWriter {
            root: root.to_path_buf(),
            stream_id,
            limits,
            current: None,
            next_chunk: 0,
            chunks: Vec::new(),
            index: Vec::new(),
            last_seq: None,
            byte_count: 0,
            first_ts: None,
            last_ts: None,
            last_flush: Instant::now(),
        })
    }

    pub fn stream_id(&self) -> u32 {
        self.stream_id
    }

    pub fn frame_count(&self) -> u64 {
        self.index.len() as u64
    }

    pub fn byte_count(&self) -> u64 {
        self.byte_count
    }

    pub fn append(&mut self, frame: &Frame) -> Result<(), RecordError> {
        if frame.stream_id != self.stream_id {
            return Err(RecordError::UnknownStream(frame.stream_id));
        }
        if let Some(last) = self.last_seq {
            if frame.seq <= last {
                return Err(RecordError::SeqOrder { stream_id: self.stream_id, last, got: frame.seq });
            }
        }
        let payload_len = u32::try_from(frame.payload.len())
            .map_err(|_| RecordError::Corrupt(format!("payload of {} bytes", frame.payload.len())))?;
        let record_len = RECORD_OVERHEAD + payload_len as u64;
        let ts = frame.session_ts_ns;

        let rotate = self.current.as_ref().is_some_and(|c| {
            c.records > 0
                && (c.size + record_len > self.limits.max_bytes
                    || ts.saturating_sub(c.first_ts) >= self.limits.max_duration_ns)
        });
        if rotate {
            self.close_chunk()?;
        }
        if self.current.is_none() {
            self.open_chunk(ts)?;
        }
        let chunk = self.current.as_mut().unwrap();

        let header = encode_record_header(&RecordHeader {
            seq: frame.seq,
            capture_ts_ns: frame.capture_ts_ns,
            session_ts_ns: ts,
            codec_id: frame.codec_id,
            reserved: 0,
            payload_len,
        });
        let crc = record_crc(&header, &frame.payload);
        let offset = chunk.size;
        let path = &chunk.path;
        chunk.out.write_all(&header).map_err(write_err(path))?;
        chunk.out.write_all(&frame.payload).map_err(write_err(path))?;
        chunk.out.write_all(&crc.to_be_bytes()).map_err(write_err(path))?;
        chunk.size += record_len;
        chunk.records += 1;

        self.index.push(IndexEntry { session_ts_ns: ts, chunk_index: chunk.index, byte_offset: offset });
        self.last_seq = Some(frame.seq);
        self.byte_count += payload_len as u64;
        self.first_ts.get_or_insert(ts);
        self.last_ts = Some(ts);
        self.flush_if_due()
    }

    /// Pushes buffered bytes to the OS once a second.
    pub fn flush_if_due(&mut self) -> Result<(), RecordError> {
        if self.last_flush.elapsed() >= FLUSH_INTERVAL {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), RecordError> {
        self.last_flush = Instant::now();
        if let Some(c) = self.current.as_mut() {
            c.out.flush().map_err(write_err(&c.path))?;
        }
        Ok(())
    }

    fn open_chunk(&mut self, first_ts: u64) -> Result<(), RecordError> {
        let index = self.next_chunk;
        let path = stream_dir(&self.root, self.stream_id).join(chunk_file_name(index));
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(write_err(&path))?;
        let mut out = BufWriter::with_capacity(WRITE_BUFFER, file);
        out.write_all(&chunk_header(self.stream_id, index)).map_err(write_err(&path))?;
        self.next_chunk += 1;
        self.current = Some(OpenChunk { index, path, out, size: CHUNK_HEADER_LEN, records: 0, first_ts });
        Ok(())
    }

    fn close_chunk(&mut self) -> Result<(), RecordError> {
        let Some(mut c) = self.current.take() else {
            return Ok(());
        };
        c.out.flush().map_err(write_err(&c.path))?;
        c.out.get_ref().sync_data().map_err(write_err(&c.path))?;
        self.chunks.push(ChunkEntry {
            file: chunk_file_name(c.index),
            chunk_index: c.index,
            record_count: c.records,
            size_bytes: c.size,
        });
        self.last_flush = Instant::now();
        Ok(())
    }

    /// Closes the open chunk and writes the index.
    pub fn finish(mut self) -> Result<StreamSummary, RecordError> {
        self.close_chunk()?;
        let mut index = std::mem::take(&mut self.index);
        index.sort_by_key(|e| e.session_ts_ns);
        let path = index_path(&self.root, self.stream_id);
        write_synced(&path, &encode_index(&index))?;
        Ok(StreamSummary {
            stream_id: self.stream_id,
            frame_count: index.len() as u64,
            byte_count: self.byte_count,
            first_session_ts_ns: index.first().map(|e| e.session_ts_ns),
            last_session_ts_ns: index.last().map(|e| e.session_ts_ns),
            chunks: self.chunks,
        })
    }
}

pub(crate) fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), RecordError> {
    let mut f = File::create(path).map_err(write_err(path))?;
    f.write_all(bytes).map_err(write_err(path))?;
    f.sync_all().map_err(write_err(path))
}

/// Session-level facts that only the supervisor knows at finalize.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinalizeInfo {
    pub drop_counts: BTreeMap<u32, u64>,
    pub clock_estimates: BTreeMap<String, OffsetEstimate>,
    pub degraded: bool,
}

/// Writes the manifest once every stream writer has finished.
#[derive(Debug, Clone)]
pub struct RecordingFinisher {
    root: PathBuf,
    header: RecordingHeader,
}

impl RecordingFinisher {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn finalize(
        &self,
        summaries: Vec<StreamSummary>,
        info: &FinalizeInfo,
    ) -> Result<RecordingManifest, RecordError> {
        let manifest = build_manifest(&self.header, summaries, info, false);
        write_manifest(&self.root, &manifest)?;
        Ok(manifest)
    }
}

pub(crate) fn build_manifest(
    header: &RecordingHeader,
    summaries: Vec<StreamSummary>,
    info: &FinalizeInfo,
    repaired: bool,
) -> RecordingManifest {
    let mut by_id: BTreeMap<u32, StreamSummary> = summaries.into_iter().map(|s| (s.stream_id, s)).collect();
    let streams = header
        .streams
        .iter()
        .map(|setup| {
            let id = setup.descriptor.stream_id;
            let s = by_id.remove(&id).unwrap_or(StreamSummary {
                stream_id: id,
                frame_count: 0,
                byte_count: 0,
                first_session_ts_ns: None,
                last_session_ts_ns: None,
                chunks: Vec::new(),
            });
            StreamManifest {
                setup: setup.clone(),
                frame_count: s.frame_count,
                byte_count: s.byte_count,
                first_session_ts_ns: s.first_session_ts_ns,
                last_session_ts_ns: s.last_session_ts_ns,
                drop_count: info.drop_counts.get(&id).copied().unwrap_or(0),
                chunks: s.chunks,
            }
        })
        .collect();
    RecordingManifest {
        format_version: FORMAT_VERSION,
        session_name: header.session_name.clone(),
        created_ts: header.created_ts,
        finalized_ts: unix_now_ns(),
        streams,
        clock_estimates: info.clock_estimates.clone(),
        external_codecs: header.external_codecs.clone(),
        degraded: info.degraded,
        repaired,
    }
}

/// Atomically publishes `manifest.json`, then drops the partial marker.
pub(crate) fn write_manifest(root: &Path, manifest: &RecordingManifest) -> Result<(), RecordError> {
    let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    let tmp = root.join("manifest.json.tmp");
    write_synced(&tmp, &json)?;
    let dst = root.join(MANIFEST_FILE);
    std::fs::rename(&tmp, &dst).map_err(write_err(&dst))?;
    let partial = root.join(PARTIAL_MARKER);
    match std::fs::remove_file(&partial) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(write_err(&partial)(e)),
    }
    if let Ok(d) = File::open(root) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// A session recording being written.
pub struct RecordingWriter {
    finisher: RecordingFinisher,
    streams: BTreeMap<u32, StreamWriter>,
}

impl RecordingWriter {
    /// Creates `root`, the stream directories and the `.partial` marker.
    pub fn create(root: &Path, header: RecordingHeader, limits: ChunkLimits) -> Result<Self, RecordError> {
        std::fs::create_dir_all(root).map_err(write_err(root))?;
        let manifest = root.join(MANIFEST_FILE);
        if manifest.exists() {
            return Err(write_err(&manifest)(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "recording already finalized",
            )));
        }
        let json = serde_json::to_vec_pretty(&header).expect("header serializes");
        write_synced(&root.join(PARTIAL_MARKER), &json)?;
        let mut streams = BTreeMap::new();
        for s in &header.streams {
            let id = s.descriptor.stream_id;
            streams.insert(id, StreamWriter::new(root, id, limits)?);
        }
        Ok(RecordingWriter { finisher: RecordingFinisher { root: root.to_path_buf(), header }, streams })
    }

    pub fn root(&self) -> &Path {
        &self.finisher.root
    }

    pub fn header(&self) -> &RecordingHeader {
        &self.finisher.header
    }

    pub fn append(&mut self, frame: &Frame) -> Result<(), RecordError> {
        self.streams
            .get_mut(&frame.stream_id)
            .ok_or(RecordError::UnknownStream(frame.stream_id))?
            .append(frame)
    }

    /// Splits into per-stream writers (one per writer thread) and the finisher.
    pub fn into_parts(self) -> (BTreeMap<u32, StreamWriter>, RecordingFinisher) {
        (self.streams, self.finisher)
    }

    pub fn finalize(self, info: &FinalizeInfo) -> Result<RecordingManifest, RecordError> {
        let (streams, finisher) = self.into_parts();
        let summaries = streams.into_values().map(StreamWriter::finish).collect::<Result<Vec<_>, _>>()?;
        finisher.finalize(summaries, info)
    }
}
