use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::chunk::{encode_index, list_chunks, read_index, scan_chunk, IndexEntry, ScanStop};
use super::writer::{build_manifest, write_manifest, write_synced, FinalizeInfo, StreamSummary};
use super::{
    chunk_file_name, index_path, read_err, stream_dir, write_err, ChunkEntry, RecordError, RecordingHeader,
    RecordingManifest, StreamSetup, CHUNK_HEADER_LEN, FORMAT_VERSION, MANIFEST_FILE, PARTIAL_MARKER,
};
use crate::codec::CodecRegistry;
use crate::simdev::{expected_payload, generate_pose, pose_time};
use crate::types::{payload_size, AdapterType, Pose};

/// Largest tolerated deviation from the regenerated pose trajectory.
pub const POSE_RESIDUAL_LIMIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingKind {
    PartialRecording,
    BadManifest,
    MissingChunk,
    UnlistedChunk,
    BadChunkHeader,
    CrcMismatch,
    Truncated,
    SeqOrder,
    SeqGap,
    CountMismatch,
    ByteCountMismatch,
    ChunkMismatch,
    IndexMismatch,
    UnknownCodec,
    DecodeFailed,
    PayloadMismatch,
    PoseResidual,
    Io,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream_id: Option<u32>,
    /// Chunk path relative to the recording directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    pub message: String,
}

impl Finding {
    fn new(kind: FindingKind, stream_id: Option<u32>, message: impl Into<String>) -> Finding {
        Finding { kind, stream_id, chunk: None, offset: None, seq: None, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamCheck {
    pub stream_id: u32,
    pub records: u64,
    pub crc_failures: u64,
    /// Sequence numbers missing before and between recorded frames.
    pub seq_gaps: u64,
    pub drop_count: u64,
    pub payloads_checked: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_pose_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub partial: bool,
    pub streams: Vec<StreamCheck>,
    pub findings: Vec<Finding>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Regenerate simulated payloads and compare.
    pub payloads: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { payloads: true }
    }
}

fn load_header(root: &Path) -> Result<(Option<RecordingManifest>, RecordingHeader), RecordError> {
    let mpath = root.join(MANIFEST_FILE);
    match std::fs::read_to_string(&mpath) {
        Ok(text) => {
            let m: RecordingManifest =
                serde_json::from_str(&text).map_err(|e| RecordError::BadManifest(e.to_string()))?;
            let header = RecordingHeader {
                format_version: m.format_version,
                session_name: m.session_name.clone(),
                created_ts: m.created_ts,
                streams: m.streams.iter().map(|s| s.setup.clone()).collect(),
                external_codecs: m.external_codecs.clone(),
            };
            Ok((Some(m), header))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let ppath = root.join(PARTIAL_MARKER);
            let text = std::fs::read_to_string(&ppath).map_err(read_err(&ppath)).map_err(|e| match e {
                RecordError::NotFound(_) => RecordError::NotFound(root.to_path_buf()),
                e => e,
            })?;
            let header = serde_json::from_str(&text).map_err(|e| RecordError::BadManifest(e.to_string()))?;
            Ok((None, header))
        }
        Err(e) => Err(read_err(&mpath)(e)),
    }
}

pub fn verify(root: &Path) -> VerifyReport {
    verify_with(root, VerifyOptions::default())
}

/// Re-reads every chunk of a recording and reports anything inconsistent.
pub fn verify_with(root: &Path, opts: VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport { partial: false, streams: Vec::new(), findings: Vec::new() };
    let (manifest, header) = match load_header(root) {
        Ok(x) => x,
        Err(e) => {
            let kind = if matches!(e, RecordError::BadManifest(_)) { FindingKind::BadManifest } else { FindingKind::Io };
            report.findings.push(Finding::new(kind, None, e.to_string()));
            return report;
        }
    };
    if manifest.is_none() {
        report.partial = true;
        report.findings.push(Finding::new(
            FindingKind::PartialRecording,
            None,
            "recording was not finalized; run verify --repair",
        ));
    } else if header.format_version != FORMAT_VERSION {
        report.findings.push(Finding::new(
            FindingKind::BadManifest,
            None,
            format!("format_version {} (expected {FORMAT_VERSION})", header.format_version),
        ));
    }
    let registry = match CodecRegistry::with_external(&header.external_codecs) {
        Ok(r) => r,
        Err(e) => {
            report.findings.push(Finding::new(FindingKind::UnknownCodec, None, e.to_string()));
            CodecRegistry::new()
        }
    };
    for setup in &header.streams {
        let sm = manifest.as_ref().and_then(|m| m.stream(setup.descriptor.stream_id));
        verify_stream(root, setup, sm, &registry, opts, &mut report);
    }
    report
}

fn verify_stream(
    root: &Path,
    setup: &StreamSetup,
    sm: Option<&super::StreamManifest>,
    registry: &CodecRegistry,
    opts: VerifyOptions,
    report: &mut VerifyReport,
) {
    let id = setup.descriptor.stream_id;
    let sid = Some(id);
    let dir = stream_dir(root, id);
    let on_disk = list_chunks(&dir);
    let rel = |name: &str| format!("streams/{id}/{name}");

    if let Some(sm) = sm {
        for c in &sm.chunks {
            if !on_disk.iter().any(|(i, _)| *i == c.chunk_index) {
                let mut f = Finding::new(FindingKind::MissingChunk, sid, format!("{} listed but absent", c.file));
                f.chunk = Some(rel(&c.file));
                report.findings.push(f);
            }
        }
        for (i, name) in &on_disk {
            if !sm.chunks.iter().any(|c| c.chunk_index == *i) {
                let mut f = Finding::new(FindingKind::UnlistedChunk, sid, format!("{name} not in manifest"));
                f.chunk = Some(rel(name));
                report.findings.push(f);
            }
        }
    }

    let expected_len = payload_size(&setup.descriptor);
    let check_payloads = opts.payloads && setup.simulated.is_some();
    let mut check = StreamCheck {
        stream_id: id,
        records: 0,
        crc_failures: 0,
        seq_gaps: 0,
        drop_count: sm.map_or(0, |s| s.drop_count),
        payloads_checked: 0,
        max_pose_residual: None,
    };
    let mut bytes = 0u64;
    let mut last_seq: Option<u64> = None;
    let mut positions: HashMap<(u32, u64), u64> = HashMap::new();

    for (chunk_index, name) in &on_disk {
        let path = dir.join(name);
        let mut local: Vec<Finding> = Vec::new();
        let outcome = scan_chunk(&path, id, *chunk_index, |rec, payload| {
            let h = &rec.header;
            if !rec.crc_ok {
                let mut f = Finding::new(FindingKind::CrcMismatch, sid, format!("{name}: bad CRC at offset {}", rec.offset));
                f.chunk = Some(rel(name));
                f.offset = Some(rec.offset);
                f.seq = Some(h.seq);
                local.push(f);
                return;
            }
            if let Some(last) = last_seq {
                if h.seq <= last {
                    let mut f = Finding::new(FindingKind::SeqOrder, sid, format!("seq {} after {last}", h.seq));
                    f.chunk = Some(rel(name));
                    f.offset = Some(rec.offset);
                    f.seq = Some(h.seq);
                    local.push(f);
                } else {
                    check.seq_gaps += h.seq - last - 1;
                }
            } else {
                check.seq_gaps += h.seq;
            }
            last_seq = Some(h.seq);
            positions.insert((*chunk_index, rec.offset), h.session_ts_ns);
            if !check_payloads {
                return;
            }
            let sim = setup.simulated.as_ref().unwrap();
            if !registry.is_registered(h.codec_id) {
                local.push(Finding::new(FindingKind::UnknownCodec, sid, format!("codec {} at seq {}", h.codec_id, h.seq)));
                return;
            }
            let decoded = match registry.decode(h.codec_id, payload, expected_len) {
                Ok(d) => d,
                Err(e) => {
                    let mut f = Finding::new(FindingKind::DecodeFailed, sid, format!("seq {}: {e}", h.seq));
                    f.seq = Some(h.seq);
                    local.push(f);
                    return;
                }
            };
            check.payloads_checked += 1;
            if sim.adapter_type == AdapterType::SimPose {
                let want = generate_pose(sim.seed, pose_time(h.seq, sim.fps));
                let got = Pose::from_bytes(&decoded);
                let residual = got.map_or(f64::INFINITY, |p| {
                    p.position
                        .iter()
                        .chain(p.orientation.iter())
                        .zip(want.position.iter().chain(want.orientation.iter()))
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                });
                let m = check.max_pose_residual.get_or_insert(0.0);
                *m = m.max(residual);
                if residual.is_nan() || residual >= POSE_RESIDUAL_LIMIT {
                    let mut f = Finding::new(FindingKind::PoseResidual, sid, format!("seq {}: residual {residual:e}", h.seq));
                    f.seq = Some(h.seq);
                    local.push(f);
                }
            } else {
                let want = expected_payload(sim.adapter_type, sim.seed, sim.fps, &setup.descriptor, h.seq);
                if decoded != want {
                    let mut f = Finding::new(FindingKind::PayloadMismatch, sid, format!("seq {} differs from its simulated source", h.seq));
                    f.seq = Some(h.seq);
                    local.push(f);
                }
            }
        });
        report.findings.append(&mut local);
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                report.findings.push(Finding::new(FindingKind::Io, sid, e.to_string()));
                continue;
            }
        };
        match &outcome.stop {
            ScanStop::Eof => {}
            ScanStop::BadHeader(msg) => {
                let mut f = Finding::new(FindingKind::BadChunkHeader, sid, format!("{name}: {msg}"));
                f.chunk = Some(rel(name));
                report.findings.push(f);
            }
            ScanStop::Truncated { offset } => {
                let mut f = Finding::new(FindingKind::Truncated, sid, format!("{name}: record at offset {offset} runs past end of file"));
                f.chunk = Some(rel(name));
                f.offset = Some(*offset);
                report.findings.push(f);
            }
        }
        let good = outcome.records.iter().filter(|r| r.crc_ok).count() as u64;
        check.crc_failures += outcome.records.len() as u64 - good;
        check.records += good;
        bytes += outcome.records.iter().filter(|r| r.crc_ok).map(|r| r.header.payload_len as u64).sum::<u64>();
        if let Some(c) = sm.and_then(|s| s.chunks.iter().find(|c| c.chunk_index == *chunk_index)) {
            if c.record_count != outcome.records.len() as u64 || c.size_bytes != outcome.file_len {
                let mut f = Finding::new(
                    FindingKind::ChunkMismatch,
                    sid,
                    format!(
                        "{name}: manifest says {} records / {} bytes, found {} / {}",
                        c.record_count,
                        c.size_bytes,
                        outcome.records.len(),
                        outcome.file_len
                    ),
                );
                f.chunk = Some(rel(name));
                report.findings.push(f);
            }
        }
    }

    if check.seq_gaps > check.drop_count && check.crc_failures == 0 && sm.is_some() {
        report.findings.push(Finding::new(
            FindingKind::SeqGap,
            sid,
            format!("{} missing seqs but only {} drops recorded", check.seq_gaps, check.drop_count),
        ));
    }

    let Some(sm) = sm else {
        report.streams.push(check);
        return;
    };
    if sm.frame_count != check.records + check.crc_failures {
        report.findings.push(Finding::new(
            FindingKind::CountMismatch,
            sid,
            format!("manifest frame_count {} but chunks hold {}", sm.frame_count, check.records + check.crc_failures),
        ));
    }
    if check.crc_failures == 0 && sm.byte_count != bytes {
        report.findings.push(Finding::new(
            FindingKind::ByteCountMismatch,
            sid,
            format!("manifest byte_count {} but chunks hold {bytes}", sm.byte_count),
        ));
    }
    match read_index(&index_path(root, id)) {
        Ok(ix) => {
            if ix.len() as u64 != sm.frame_count {
                report.findings.push(Finding::new(
                    FindingKind::IndexMismatch,
                    sid,
                    format!("index has {} entries, manifest {}", ix.len(), sm.frame_count),
                ));
            }
            if ix.windows(2).any(|w| w[0].session_ts_ns > w[1].session_ts_ns) {
                report.findings.push(Finding::new(FindingKind::IndexMismatch, sid, "index not sorted by session time"));
            }
            let bad = ix
                .iter()
                .filter(|e| positions.get(&(e.chunk_index, e.byte_offset)) != Some(&e.session_ts_ns))
                .count();
            if bad > 0 && check.crc_failures == 0 {
                report.findings.push(Finding::new(
                    FindingKind::IndexMismatch,
                    sid,
                    format!("{bad} index entries do not point at a matching record"),
                ));
            }
        }
        Err(e) => report.findings.push(Finding::new(FindingKind::IndexMismatch, sid, e.to_string())),
    }
    report.streams.push(check);
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairReport {
    /// Frames kept per stream.
    pub recovered: BTreeMap<u32, u64>,
    pub truncated_bytes: u64,
    /// Chunks set aside (renamed to `*.orphan`) because they follow damage.
    pub orphaned_chunks: Vec<String>,
}

/// Salvages a recording: keeps each stream's longest run of intact records
/// from the start, truncates the chunk holding the first damage, sets aside
/// later chunks, rebuilds the index and writes a manifest.
pub fn repair(root: &Path) -> Result<(RepairReport, RecordingManifest), RecordError> {
    let (old, header) = load_header(root)?;
    let mut info = FinalizeInfo::default();
    if let Some(m) = &old {
        info.clock_estimates = m.clock_estimates.clone();
        info.degraded = m.degraded;
        info.drop_counts = m.streams.iter().map(|s| (s.stream_id(), s.drop_count)).collect();
    }
    let mut report = RepairReport::default();
    let mut summaries = Vec::new();

    for setup in &header.streams {
        let id = setup.descriptor.stream_id;
        let dir = stream_dir(root, id);
        std::fs::create_dir_all(&dir).map_err(write_err(&dir))?;
        let mut index: Vec<IndexEntry> = Vec::new();
        let mut chunks: Vec<ChunkEntry> = Vec::new();
        let mut bytes = 0u64;
        let mut damaged = false;
        let mut next_index = 0u32;

        for (chunk_index, name) in list_chunks(&dir) {
            let path = dir.join(&name);
            if damaged || chunk_index != next_index {
                damaged = true;
                let orphan = dir.join(format!("{name}.orphan"));
                std::fs::rename(&path, &orphan).map_err(write_err(&path))?;
                report.orphaned_chunks.push(format!("streams/{id}/{name}"));
                continue;
            }
            let outcome = scan_chunk(&path, id, chunk_index, |_, _| {})?;
            if matches!(outcome.stop, ScanStop::BadHeader(_)) {
                damaged = true;
                let orphan = dir.join(format!("{name}.orphan"));
                std::fs::rename(&path, &orphan).map_err(write_err(&path))?;
                report.orphaned_chunks.push(format!("streams/{id}/{name}"));
                continue;
            }
            let prefix = outcome.intact_prefix();
            let keep = prefix.last().map_or(CHUNK_HEADER_LEN, |r| r.end());
            if keep < outcome.file_len {
                damaged = true;
                let f = std::fs::OpenOptions::new().write(true).open(&path).map_err(write_err(&path))?;
                f.set_len(keep).map_err(write_err(&path))?;
                f.sync_all().map_err(write_err(&path))?;
                report.truncated_bytes += outcome.file_len - keep;
            }
            for r in prefix {
                index.push(IndexEntry { session_ts_ns: r.header.session_ts_ns, chunk_index, byte_offset: r.offset });
                bytes += r.header.payload_len as u64;
            }
            chunks.push(ChunkEntry {
                file: chunk_file_name(chunk_index),
                chunk_index,
                record_count: prefix.len() as u64,
                size_bytes: keep,
            });
            next_index += 1;
        }

        index.sort_by_key(|e| e.session_ts_ns);
        write_synced(&index_path(root, id), &encode_index(&index))?;
        report.recovered.insert(id, index.len() as u64);
        summaries.push(StreamSummary {
            stream_id: id,
            frame_count: index.len() as u64,
            byte_count: bytes,
            first_session_ts_ns: index.first().map(|e| e.session_ts_ns),
            last_session_ts_ns: index.last().map(|e| e.session_ts_ns),
            chunks,
        });
    }

    let mut manifest = build_manifest(&header, summaries, &info, true);
    if let Some(m) = &old {
        manifest.finalized_ts = m.finalized_ts;
    }
    write_manifest(root, &manifest)?;
    Ok((report, manifest))
}
