use std::collections::HashMap;
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;

use super::chunk::{decode_record_header, read_index, record_crc, IndexEntry, RecordHeader};
use super::{
    chunk_file_name, index_path, read_err, stream_dir, RecordError, RecordingManifest, StreamManifest,
    MANIFEST_FILE, PARTIAL_MARKER, RECORD_HEADER_LEN,
};
use crate::codec::CodecRegistry;
use crate::types::payload_size;

/// A frame read back from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedFrame {
    pub stream_id: u32,
    pub seq: u64,
    pub capture_ts_ns: u64,
    pub session_ts_ns: u64,
    pub codec_id: u8,
    /// Decoded payload; empty when read headers-only.
    pub payload: Vec<u8>,
}

/// A finalized (or repaired) recording opened for reading.
pub struct Recording {
    root: PathBuf,
    manifest: RecordingManifest,
    registry: CodecRegistry,
    indices: Mutex<HashMap<u32, Arc<Vec<IndexEntry>>>>,
    files: Mutex<HashMap<(u32, u32), Arc<File>>>,
}

impl Recording {
    pub fn open(root: &Path) -> Result<Recording, RecordError> {
        let path = root.join(MANIFEST_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(if root.join(PARTIAL_MARKER).exists() {
                    RecordError::Partial(root.to_path_buf())
                } else {
                    RecordError::NotFound(root.to_path_buf())
                });
            }
            Err(e) => return Err(read_err(&path)(e)),
        };
        let manifest: RecordingManifest =
            serde_json::from_str(&text).map_err(|e| RecordError::BadManifest(e.to_string()))?;
        let registry = CodecRegistry::with_external(&manifest.external_codecs)?;
        Ok(Recording {
            root: root.to_path_buf(),
            manifest,
            registry,
            indices: Mutex::new(HashMap::new()),
            files: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RecordingManifest {
        &self.manifest
    }

    pub fn registry(&self) -> &CodecRegistry {
        &self.registry
    }

    fn stream(&self, stream_id: u32) -> Result<&StreamManifest, RecordError> {
        self.manifest.stream(stream_id).ok_or(RecordError::UnknownStream(stream_id))
    }

    /// Index entries of a stream, sorted by session time.
    pub fn index(&self, stream_id: u32) -> Result<Arc<Vec<IndexEntry>>, RecordError> {
        self.stream(stream_id)?;
        if let Some(ix) = self.indices.lock().get(&stream_id) {
            return Ok(ix.clone());
        }
        let ix = Arc::new(read_index(&index_path(&self.root, stream_id))?);
        self.indices.lock().insert(stream_id, ix.clone());
        Ok(ix)
    }

    fn chunk_file(&self, stream_id: u32, chunk_index: u32) -> Result<(Arc<File>, PathBuf), RecordError> {
        let path = stream_dir(&self.root, stream_id).join(chunk_file_name(chunk_index));
        let mut files = self.files.lock();
        if let Some(f) = files.get(&(stream_id, chunk_index)) {
            return Ok((f.clone(), path));
        }
        let f = Arc::new(File::open(&path).map_err(read_err(&path))?);
        files.insert((stream_id, chunk_index), f.clone());
        Ok((f, path))
    }

    fn read_header(&self, stream_id: u32, entry: &IndexEntry) -> Result<(RecordHeader, [u8; RECORD_HEADER_LEN], Arc<File>, PathBuf), RecordError> {
        let (file, path) = self.chunk_file(stream_id, entry.chunk_index)?;
        let mut hb = [0u8; RECORD_HEADER_LEN];
        file.read_exact_at(&mut hb, entry.byte_offset)
            .map_err(|_| RecordError::Corrupt(format!("{}: no record at offset {}", path.display(), entry.byte_offset)))?;
        Ok((decode_record_header(&hb), hb, file, path))
    }

    /// Reads and CRC-checks one record, returning its still-encoded payload.
    pub fn read_encoded(&self, stream_id: u32, entry: &IndexEntry) -> Result<RecordedFrame, RecordError> {
        let (h, hb, file, path) = self.read_header(stream_id, entry)?;
        let mut buf = vec![0u8; h.payload_len as usize + 4];
        file.read_exact_at(&mut buf, entry.byte_offset + RECORD_HEADER_LEN as u64)
            .map_err(|_| RecordError::CrcMismatch { chunk: path.clone(), offset: entry.byte_offset })?;
        let crc = u32::from_be_bytes(buf[buf.len() - 4..].try_into().unwrap());
        buf.truncate(h.payload_len as usize);
        if crc != record_crc(&hb, &buf) {
            return Err(RecordError::CrcMismatch { chunk: path, offset: entry.byte_offset });
        }
        Ok(RecordedFrame {
            stream_id,
            seq: h.seq,
            capture_ts_ns: h.capture_ts_ns,
            session_ts_ns: h.session_ts_ns,
            codec_id: h.codec_id,
            payload: buf,
        })
    }

    /// Reads, CRC-checks and decodes one record.
    pub fn read_entry(&self, stream_id: u32, entry: &IndexEntry) -> Result<RecordedFrame, RecordError> {
        let mut f = self.read_encoded(stream_id, entry)?;
        let expected = payload_size(&self.stream(stream_id)?.setup.descriptor);
        f.payload = self.registry.decode(f.codec_id, &f.payload, expected)?;
        Ok(f)
    }

    /// Record metadata without touching the payload.
    pub fn read_meta(&self, stream_id: u32, entry: &IndexEntry) -> Result<RecordedFrame, RecordError> {
        let (h, ..) = self.read_header(stream_id, entry)?;
        Ok(RecordedFrame {
            stream_id,
            seq: h.seq,
            capture_ts_ns: h.capture_ts_ns,
            session_ts_ns: h.session_ts_ns,
            codec_id: h.codec_id,
            payload: Vec::new(),
        })
    }

    /// Frames with `t0 <= session_ts_ns < t1`, in session-time order.
    pub fn read_range(&self, stream_id: u32, t0: u64, t1: u64) -> Result<Vec<RecordedFrame>, RecordError> {
        let ix = self.index(stream_id)?;
        let lo = ix.partition_point(|e| e.session_ts_ns < t0);
        let hi = ix.partition_point(|e| e.session_ts_ns < t1).max(lo);
        ix[lo..hi].iter().map(|e| self.read_entry(stream_id, e)).collect()
    }

    /// Every frame of a stream in session-time order.
    pub fn frames(&self, stream_id: u32) -> Result<impl Iterator<Item = Result<RecordedFrame, RecordError>> + '_, RecordError> {
        let ix = self.index(stream_id)?;
        Ok((0..ix.len()).map(move |i| self.read_entry(stream_id, &ix[i])))
    }

    /// Iterates `master` frames, pairing each with one frame from every other
    /// stream in `stream_ids` (the master itself is skipped if listed).
    pub fn aligned_cursor(&self, stream_ids: &[u32], master: u32, mode: AlignMode) -> Result<AlignedCursor<'_>, RecordError> {
        let master_ix = self.index(master)?;
        let mut others = Vec::new();
        for &id in stream_ids {
            if id != master && !others.iter().any(|(o, _)| *o == id) {
                others.push((id, self.index(id)?));
            }
        }
        let master_ts: Vec<u64> = master_ix.iter().map(|e| e.session_ts_ns).collect();
        let other_ts: Vec<Vec<u64>> = others.iter().map(|(_, ix)| ix.iter().map(|e| e.session_ts_ns).collect()).collect();
        let refs: Vec<&[u64]> = other_ts.iter().map(Vec::as_slice).collect();
        let plan = align(&master_ts, &refs, mode);
        Ok(AlignedCursor { rec: self, master, master_ix, others, plan, pos: 0, payloads: true })
    }
}

/// How a non-master stream is matched to a master timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    /// Latest frame at or before the master time.
    #[default]
    SampleAndHold,
    /// Closest frame in either direction; ties go to the earlier one.
    Nearest,
}

/// For each master timestamp, the chosen index into every other stream.
/// Timestamps must be sorted. Among equal timestamps the last one wins.
pub fn align(master: &[u64], others: &[&[u64]], mode: AlignMode) -> Vec<Vec<Option<usize>>> {
    master
        .iter()
        .map(|&t| {
            others
                .iter()
                .map(|ts| {
                    let after = ts.partition_point(|&x| x <= t);
                    let before = after.checked_sub(1);
                    match mode {
                        AlignMode::SampleAndHold => before,
                        AlignMode::Nearest => match (before, ts.get(after)) {
                            (Some(b), Some(&a)) if a - t < t - ts[b] => Some(ts.partition_point(|&x| x <= a) - 1),
                            (Some(b), _) => Some(b),
                            (None, Some(&a)) => Some(ts.partition_point(|&x| x <= a) - 1),
                            (None, None) => None,
                        },
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedTuple {
    pub master: RecordedFrame,
    /// One slot per non-master stream, in request order.
    pub others: Vec<(u32, Option<RecordedFrame>)>,
}

pub struct AlignedCursor<'a> {
    rec: &'a Recording,
    master: u32,
    master_ix: Arc<Vec<IndexEntry>>,
    others: Vec<(u32, Arc<Vec<IndexEntry>>)>,
    plan: Vec<Vec<Option<usize>>>,
    pos: usize,
    payloads: bool,
}

impl AlignedCursor<'_> {
    /// Skip payload reads and decoding; frames carry metadata only.
    pub fn headers_only(mut self) -> Self {
        self.payloads = false;
        self
    }

    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    fn read(&self, stream_id: u32, e: &IndexEntry) -> Result<RecordedFrame, RecordError> {
        if self.payloads {
            self.rec.read_entry(stream_id, e)
        } else {
            self.rec.read_meta(stream_id, e)
        }
    }
}

impl Iterator for AlignedCursor<'_> {
    type Item = Result<AlignedTuple, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        let row = self.plan.get(self.pos)?;
        let entry = self.master_ix[self.pos];
        self.pos += 1;
        let build = || {
            let master = self.read(self.master, &entry)?;
            let mut others = Vec::with_capacity(row.len());
            for ((id, ix), slot) in self.others.iter().zip(row) {
                let f = slot.map(|i| self.read(*id, &ix[i])).transpose()?;
                others.push((*id, f));
            }
            Ok(AlignedTuple { master, others })
        };
        Some(build())
    }
}
