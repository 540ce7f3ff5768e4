#![allow(dead_code)]

pub mod arb;
pub mod drle_ref;
pub mod inputs;
pub mod netsim;
pub mod oracles;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::sync::{Arc, Mutex};

use bytes::Bytes;
use dhub_core::codec::{CodecRegistry, DRLE, RAW};
use dhub_core::record::{ChunkLimits, FinalizeInfo, RecordingHeader, RecordingManifest, RecordingWriter, SimulatedSource, StreamSetup, FORMAT_VERSION};
use dhub_core::simdev::{expected_payload, AdapterSpec};
use dhub_core::{AdapterType, Frame};

pub fn pose_setup(id: u32) -> StreamSetup {
    let spec = AdapterSpec::with_defaults(AdapterType::SimPose, 3, "hub-a", id);
    StreamSetup {
        descriptor: spec.descriptors[0].clone(),
        codec_id: RAW,
        lossy: false,
        simulated: Some(SimulatedSource { adapter_type: AdapterType::SimPose, seed: 3, fps: 200.0 }),
    }
}

pub fn small_us_setup(id: u32) -> StreamSetup {
    let mut spec = AdapterSpec::with_defaults(AdapterType::SimUs, 9, "hub-a", id);
    spec.descriptors[0].width = 16;
    spec.descriptors[0].height = 8;
    StreamSetup {
        descriptor: spec.descriptors[0].clone(),
        codec_id: DRLE,
        lossy: false,
        simulated: Some(SimulatedSource { adapter_type: AdapterType::SimUs, seed: 9, fps: 60.0 }),
    }
}

pub fn sim_frame(setup: &StreamSetup, seq: u64, ts: u64) -> Frame {
    let sim = setup.simulated.as_ref().unwrap();
    let raw = expected_payload(sim.adapter_type, sim.seed, sim.fps, &setup.descriptor, seq);
    let payload = CodecRegistry::new().encode(setup.codec_id, &raw).unwrap();
    Frame {
        stream_id: setup.descriptor.stream_id,
        seq,
        capture_ts_ns: ts,
        session_ts_ns: ts,
        codec_id: setup.codec_id,
        payload: Bytes::from(payload),
    }
}

/// Writes `n` frames per stream at each stream's nominal rate.
pub fn write_sim(root: &Path, setups: &[StreamSetup], n: u64) -> RecordingManifest {
    let header = RecordingHeader {
        format_version: FORMAT_VERSION,
        session_name: "t".into(),
        created_ts: 1,
        streams: setups.to_vec(),
        external_codecs: Vec::new(),
    };
    let mut w = RecordingWriter::create(root, header, ChunkLimits::default()).unwrap();
    for seq in 0..n {
        for s in setups {
            let period = (1e9 / s.descriptor.nominal_fps) as u64;
            w.append(&sim_frame(s, seq, seq * period)).unwrap();
        }
    }
    w.finalize(&FinalizeInfo::default()).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeenRequest {
    pub method: String,
    pub path: String,
    pub body: String,
}

/// Minimal HTTP server answering every request with a canned response
/// chosen by `route`, and recording what it received.
pub struct MockSupervisor {
    pub addr: SocketAddr,
    pub seen: Arc<Mutex<Vec<SeenRequest>>>,
}

impl MockSupervisor {
    pub fn start(route: impl Fn(&SeenRequest) -> (u16, String) + Send + 'static) -> MockSupervisor {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for s in l.incoming() {
                let Ok(mut s) = s else { continue };
                let mut r = BufReader::new(s.try_clone().unwrap());
                let mut line = String::new();
                if r.read_line(&mut line).is_err() {
                    continue;
                }
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or("").to_string();
                let path = parts.next().unwrap_or("").to_string();
                let mut len = 0usize;
                loop {
                    let mut h = String::new();
                    r.read_line(&mut h).unwrap();
                    if h.trim().is_empty() {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0u8; len];
                r.read_exact(&mut body).unwrap();
                let req = SeenRequest { method, path, body: String::from_utf8_lossy(&body).into_owned() };
                let (status, text) = route(&req);
                log.lock().unwrap().push(req);
                let _ = write!(
                    s,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
            }
        });
        MockSupervisor { addr, seen }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

pub struct Run {
    pub code: i32,
    pub out: String,
    pub err: String,
}

pub fn dhub(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["dhub"];
    argv.extend_from_slice(args);
    let code = dhub_core::cli::run(argv, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}
