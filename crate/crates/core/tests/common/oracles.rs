//! Independent oracles for the recording format: brute-force alignment and
//! the intact-prefix length after truncating a chunk.

use std::path::Path;

use bytes::Bytes;
use dhub_core::codec::RAW;
use dhub_core::record::{AlignMode, ChunkLimits, FinalizeInfo, Recording, RecordingHeader, RecordingWriter, StreamSetup, FORMAT_VERSION};
use dhub_core::Frame;
use proptest::prelude::*;

use super::pose_setup;

/// Session timestamps per stream, in write order (unsorted, with repeats).
#[derive(Debug, Clone)]
pub struct AlignInstance {
    pub streams: Vec<Vec<u64>>,
}

pub fn align_instance(max_streams: usize, max_frames: usize) -> impl Strategy<Value = AlignInstance> {
    (1..=max_streams, 1u64..5000)
        .prop_flat_map(move |(n, span)| {
            let per = max_frames / n;
            prop::collection::vec(prop::collection::vec(0..span, 0..=per), n)
        })
        .prop_map(|streams| AlignInstance { streams })
}

fn header(n: usize) -> RecordingHeader {
    RecordingHeader {
        format_version: FORMAT_VERSION,
        session_name: "align".into(),
        created_ts: 1,
        streams: (1..=n as u32).map(|i| StreamSetup { simulated: None, ..pose_setup(i) }).collect(),
        external_codecs: vec![],
    }
}

/// Stream ids are 1..=n; frame seq is the write position.
pub fn write_instance(root: &Path, inst: &AlignInstance) {
    let mut w = RecordingWriter::create(root, header(inst.streams.len()), ChunkLimits { max_bytes: 4096, max_duration_ns: 1500 }).unwrap();
    // interleave streams so chunks of different streams rotate independently
    let longest = inst.streams.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..longest {
        for (s, ts) in inst.streams.iter().enumerate() {
            if let Some(&t) = ts.get(k) {
                w.append(&Frame {
                    stream_id: s as u32 + 1,
                    seq: k as u64,
                    capture_ts_ns: t,
                    session_ts_ns: t,
                    codec_id: RAW,
                    payload: Bytes::from((k as u64).to_be_bytes().to_vec()),
                })
                .unwrap();
            }
        }
    }
    w.finalize(&FinalizeInfo::default()).unwrap();
}

/// Rows of (master seq, chosen seq per other stream) by exhaustive search:
/// masters in (ts, write order); partner is the latest at or before the
/// master time, the last written among equals.
pub fn brute_force_alignment(inst: &AlignInstance, master: usize) -> Vec<(u64, Vec<Option<u64>>)> {
    let mut order: Vec<(u64, u64)> = inst.streams[master].iter().enumerate().map(|(i, &t)| (t, i as u64)).collect();
    order.sort();
    order
        .into_iter()
        .map(|(t, seq)| {
            let others = (0..inst.streams.len())
                .filter(|&s| s != master)
                .map(|s| {
                    let mut best: Option<(u64, u64)> = None;
                    for (i, &u) in inst.streams[s].iter().enumerate() {
                        if u <= t && best.is_none_or(|b| (u, i as u64) > b) {
                            best = Some((u, i as u64));
                        }
                    }
                    best.map(|b| b.1)
                })
                .collect();
            (seq, others)
        })
        .collect()
}

pub fn cursor_alignment(rec: &Recording, n: usize, master: usize) -> Vec<(u64, Vec<Option<u64>>)> {
    let ids: Vec<u32> = (1..=n as u32).collect();
    rec.aligned_cursor(&ids, master as u32 + 1, AlignMode::SampleAndHold)
        .unwrap()
        .headers_only()
        .map(|r| {
            let r = r.unwrap();
            (r.master.seq, r.others.iter().map(|(_, f)| f.as_ref().map(|f| f.seq)).collect())
        })
        .collect()
}

/// Records left intact when a chunk holding records with these payload
/// lengths is cut to `len` bytes: 12-byte chunk header, then 34 + payload
/// bytes per record.
pub fn intact_records(payload_lens: &[usize], len: u64) -> usize {
    let mut end = 12u64;
    let mut n = 0;
    for &p in payload_lens {
        end += 34 + p as u64;
        if end > len {
            break;
        }
        n += 1;
    }
    n
}
