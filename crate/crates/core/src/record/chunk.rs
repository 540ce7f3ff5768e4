use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use super::{read_err, RecordError, CHUNK_HEADER_LEN, CHUNK_MAGIC, INDEX_ENTRY_LEN, RECORD_HEADER_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordHeader {
    pub seq: u64,
    pub capture_ts_ns: u64,
    pub session_ts_ns: u64,
    pub codec_id: u8,
    pub reserved: u8,
    pub payload_len: u32,
}

pub fn encode_record_header(h: &RecordHeader) -> [u8; RECORD_HEADER_LEN] {
    let mut b = [0u8; RECORD_HEADER_LEN];
    b[0..8].copy_from_slice(&h.seq.to_be_bytes());
    b[8..16].copy_from_slice(&h.capture_ts_ns.to_be_bytes());
    b[16..24].copy_from_slice(&h.session_ts_ns.to_be_bytes());
    b[24] = h.codec_id;
    b[25] = h.reserved;
    b[26..30].copy_from_slice(&h.payload_len.to_be_bytes());
    b
}

pub fn decode_record_header(b: &[u8; RECORD_HEADER_LEN]) -> RecordHeader {
    let u64_at = |i: usize| u64::from_be_bytes(b[i..i + 8].try_into().unwrap());
    RecordHeader {
        seq: u64_at(0),
        capture_ts_ns: u64_at(8),
        session_ts_ns: u64_at(16),
        codec_id: b[24],
        reserved: b[25],
        payload_len: u32::from_be_bytes(b[26..30].try_into().unwrap()),
    }
}

pub(crate) fn chunk_header(stream_id: u32, chunk_index: u32) -> [u8; CHUNK_HEADER_LEN as usize] {
    let mut b = [0u8; CHUNK_HEADER_LEN as usize];
    b[0..4].copy_from_slice(CHUNK_MAGIC);
    b[4..8].copy_from_slice(&stream_id.to_be_bytes());
    b[8..12].copy_from_slice(&chunk_index.to_be_bytes());
    b
}

pub(crate) fn record_crc(header: &[u8; RECORD_HEADER_LEN], payload: &[u8]) -> u32 {
    crc32c::crc32c_append(crc32c::crc32c(header), payload)
}

/// One index entry: where the record with this session time lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub session_ts_ns: u64,
    pub chunk_index: u32,
    pub byte_offset: u64,
}

impl IndexEntry {
    pub fn to_bytes(&self) -> [u8; INDEX_ENTRY_LEN] {
        let mut b = [0u8; INDEX_ENTRY_LEN];
        b[0..8].copy_from_slice(&self.session_ts_ns.to_be_bytes());
        b[8..12].copy_from_slice(&self.chunk_index.to_be_bytes());
        b[12..20].copy_from_slice(&self.byte_offset.to_be_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> IndexEntry {
        IndexEntry {
            session_ts_ns: u64::from_be_bytes(b[0..8].try_into().unwrap()),
            chunk_index: u32::from_be_bytes(b[8..12].try_into().unwrap()),
            byte_offset: u64::from_be_bytes(b[12..20].try_into().unwrap()),
        }
    }
}

pub(crate) fn encode_index(entries: &[IndexEntry]) -> Vec<u8> {
    let mut out = Vec::with_capacity(entries.len() * INDEX_ENTRY_LEN);
    for e in entries {
        out.extend_from_slice(&e.to_bytes());
    }
    out
}

pub(crate) fn read_index(path: &Path) -> Result<Vec<IndexEntry>, RecordError> {
    let bytes = std::fs::read(path).map_err(read_err(path))?;
    if bytes.len() % INDEX_ENTRY_LEN != 0 {
        return Err(RecordError::Corrupt(format!("{}: length {} is not a multiple of {INDEX_ENTRY_LEN}", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(INDEX_ENTRY_LEN).map(IndexEntry::from_bytes).collect())
}

/// A record found while scanning a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScannedRecord {
    pub header: RecordHeader,
    pub offset: u64,
    pub crc_ok: bool,
}

impl ScannedRecord {
    pub fn end(&self) -> u64 {
        self.offset + super::RECORD_OVERHEAD + self.header.payload_len as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanStop {
    /// Clean end of file after the last record.
    Eof,
    /// The chunk header is missing or names another stream/chunk.
    BadHeader(String),
    /// A record runs past the end of the file.
    Truncated { offset: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOutcome {
    pub records: Vec<ScannedRecord>,
    pub stop: ScanStop,
    pub file_len: u64,
}

impl ScanOutcome {
    /// Records before the first damaged one.
    pub fn intact_prefix(&self) -> &[ScannedRecord] {
        let n = self.records.iter().position(|r| !r.crc_ok).unwrap_or(self.records.len());
        &self.records[..n]
    }

    pub fn is_clean(&self) -> bool {
        self.stop == ScanStop::Eof && self.records.iter().all(|r| r.crc_ok)
    }
}

/// Walks every record of a chunk, handing each header and payload to `visit`.
/// Records with a bad CRC are reported and scanning continues past them.
pub fn scan_chunk(
    path: &Path,
    stream_id: u32,
    chunk_index: u32,
    mut visit: impl FnMut(&ScannedRecord, &[u8]),
) -> Result<ScanOutcome, RecordError> {
    let file = File::open(path).map_err(read_err(path))?;
    let file_len = file.metadata().map_err(read_err(path))?.len();
    let mut r = BufReader::with_capacity(1 << 20, file);
    let mut records = Vec::new();

    let mut head = [0u8; CHUNK_HEADER_LEN as usize];
    if file_len < CHUNK_HEADER_LEN {
        return Ok(ScanOutcome { records, stop: ScanStop::BadHeader(format!("file is {file_len} bytes")), file_len });
    }
    r.read_exact(&mut head).map_err(read_err(path))?;
    if head != chunk_header(stream_id, chunk_index) {
        let msg = if &head[0..4] != CHUNK_MAGIC {
            "bad magic".to_string()
        } else {
            format!(
                "header names stream {} chunk {}",
                u32::from_be_bytes(head[4..8].try_into().unwrap()),
                u32::from_be_bytes(head[8..12].try_into().unwrap())
            )
        };
        return Ok(ScanOutcome { records, stop: ScanStop::BadHeader(msg), file_len });
    }

    let mut offset = CHUNK_HEADER_LEN;
    let mut payload = Vec::new();
    let stop = loop {
        if offset == file_len {
            break ScanStop::Eof;
        }
        if file_len - offset < super::RECORD_OVERHEAD {
            break ScanStop::Truncated { offset };
        }
        let mut hb = [0u8; RECORD_HEADER_LEN];
        r.read_exact(&mut hb).map_err(read_err(path))?;
        let header = decode_record_header(&hb);
        if file_len - offset < super::RECORD_OVERHEAD + header.payload_len as u64 {
            break ScanStop::Truncated { offset };
        }
        payload.resize(header.payload_len as usize, 0);
        r.read_exact(&mut payload).map_err(read_err(path))?;
        let mut cb = [0u8; 4];
        r.read_exact(&mut cb).map_err(read_err(path))?;
        let rec = ScannedRecord { header, offset, crc_ok: u32::from_be_bytes(cb) == record_crc(&hb, &payload) };
        visit(&rec, &payload);
        offset = rec.end();
        records.push(rec);
    };
    Ok(ScanOutcome { records, stop, file_len })
}

/// Chunk files present in a stream directory, sorted by index.
pub(crate) fn list_chunks(dir: &Path) -> Vec<(u32, String)> {
    let Ok(rd) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut out: Vec<(u32, String)> = rd
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let idx = name.strip_prefix("chunk-")?.strip_suffix(".dhc")?.parse().ok()?;
            Some((idx, name))
        })
        .collect();
    out.sort();
    out
}
