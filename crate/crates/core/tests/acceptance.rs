//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 4 5`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use common::inputs::{payload, runless};
use common::netsim::{self, Link};
use common::oracles::{align_instance, brute_force_alignment, cursor_alignment, intact_records, write_instance};
use common::{arb, pose_setup, small_us_setup, write_sim};
use dhub_core::clock::SimClock;
use dhub_core::clocksync::to_session_time;
use dhub_core::codec::{drle, CodecError, CodecRegistry, DRLE, RAW};
use dhub_core::hub::handle_control;
use dhub_core::record::{
    chunk_file_name, repair, stream_dir, verify, ChunkLimits, FinalizeInfo, Recording, RecordingHeader, RecordingManifest,
    RecordingWriter, SimulatedSource, StreamSetup, FORMAT_VERSION,
};
use dhub_core::simdev::{run_adapter, AdapterSpec, FrameSink};
use dhub_core::supervisor::{transition, Session, SessionEvent, SessionState, SessionView};
use dhub_core::wire::{
    decode_message, decode_message_bytes, encode_message, ControlCommand, ControlRequest, ErrorCode, HubConfiguration, Message,
    MessageType,
};
use dhub_core::{AdapterConfig, AdapterType, Frame, HubAddress, HubState, SessionConfig, StreamConfig};
use parking_lot::Mutex;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, RngCore};

struct Outcome {
    pass: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, lines: Vec<String>) -> Outcome {
        Outcome { pass, lines }
    }
}

fn runner(cases: u32) -> TestRunner {
    let cfg = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want
}

fn pct(got: f64, want: f64) -> f64 {
    100.0 * (got - want) / want
}

// ---------------------------------------------------------------------------
// 1 + 3: desk-scale session over real processes

struct Daemon(Child);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn spawn(bin: &str, args: &[&str]) -> Daemon {
    Daemon(
        Command::new(bin)
            .args(args)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap_or_else(|e| panic!("{bin}: {e}")),
    )
}

fn stream(t: AdapterType, hub: &str, first_id: u32, fps: f64, codecs: &[u8]) -> Vec<StreamConfig> {
    AdapterSpec::with_defaults(t, 7, hub, first_id)
        .descriptors
        .into_iter()
        .zip(codecs)
        .map(|(mut d, &codec_id)| {
            d.nominal_fps = fps;
            StreamConfig {
                descriptor: d,
                adapter: AdapterConfig { adapter_type: t, seed: 7, fps: None, jitter_ppm: 0, device: None },
                codec_id,
            }
        })
        .collect()
}

fn desk_config(storage: &Path) -> SessionConfig {
    let mut streams = stream(AdapterType::SimUs, "a", 1, 60.2, &[DRLE]);
    streams.extend(stream(AdapterType::SimPose, "a", 2, 200.8, &[RAW]));
    streams.extend(stream(AdapterType::SimRgbd, "b", 3, 29.6, &[DRLE, RAW]));
    SessionConfig {
        session_name: "desk".into(),
        hubs: ["a", "b"].iter().map(|h| HubAddress { hub_id: h.to_string(), address: String::new() }).collect(),
        streams,
        storage_dir: storage.to_string_lossy().into_owned(),
        queue_capacity: dhub_core::DEFAULT_QUEUE_CAPACITY,
        metrics_interval_ms: dhub_core::DEFAULT_METRICS_INTERVAL_MS,
        external_codecs: vec![],
    }
}

fn poll<T>(timeout: Duration, mut f: impl FnMut() -> Option<T>) -> Option<T> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(v) = f() {
            return Some(v);
        }
        if Instant::now() > deadline {
            return None;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}

fn desk_session() -> Vec<(u8, Outcome)> {
    const SECONDS: f64 = 30.0;
    let t0 = Instant::now();
    let tmp = tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR")).unwrap();
    let hub_port = free_port().to_string();
    let api_port = free_port().to_string();
    let hub_ep = format!("127.0.0.1:{hub_port}");
    let api = format!("http://127.0.0.1:{api_port}");
    let storage = tmp.path().to_str().unwrap();
    let _sup = spawn(
        env!("CARGO_BIN_EXE_supd"),
        &["--listen", &hub_ep, "--api", &format!("127.0.0.1:{api_port}"), "--storage", storage, "--log-level", "warn"],
    );
    let _hubs: Vec<Daemon> = ["a", "b"]
        .iter()
        .map(|h| spawn(env!("CARGO_BIN_EXE_hubd"), &["--hub-id", h, "--supervisor", &hub_ep, "--log-level", "warn"]))
        .collect();

    let cfg = desk_config(&tmp.path().join("rec"));
    let get = |path: &str| ureq::get(&format!("{api}{path}")).call().ok()?.into_string().ok();
    let session = || serde_json::from_str::<SessionView>(&get("/api/session")?).ok();
    let body = serde_json::to_string(&cfg).unwrap();
    poll(Duration::from_secs(10), || ureq::put(&format!("{api}/api/session")).send_string(&body).ok()).expect("apply session");
    poll(Duration::from_secs(10), || session().filter(|v| v.hubs_ready.values().all(|&r| r) && v.hubs_ready.len() == 2))
        .expect("hubs ready");

    ureq::post(&format!("{api}/api/session/start")).call().expect("start");
    std::thread::sleep(Duration::from_secs_f64(SECONDS));
    ureq::post(&format!("{api}/api/session/stop")).call().expect("stop");
    let done = poll(Duration::from_secs(20), || session().filter(|v| v.state == SessionState::Complete)).expect("complete");
    let name = done.recording.expect("recording name");
    let man: RecordingManifest = serde_json::from_str(&get(&format!("/api/recordings/{name}")).expect("manifest")).unwrap();
    let runtime = t0.elapsed().as_secs_f64();

    let mut ok1 = runtime < 60.0;
    let mut lines = Vec::new();
    for s in &man.streams {
        let fps = s.setup.descriptor.nominal_fps;
        let want = fps * SECONDS;
        let fps_ok = within(s.mean_fps(), fps, 0.02);
        let count_ok = within(s.frame_count as f64, want, 0.02);
        ok1 &= fps_ok && count_ok && s.drop_count == 0;
        lines.push(format!(
            "stream {} {:<5} codec {}: mean fps {:.2} vs {fps} ({:+.2}%), frames {} vs {want:.0} ({:+.2}%), drops {}",
            s.stream_id(),
            s.setup.descriptor.name,
            s.setup.codec_id,
            s.mean_fps(),
            pct(s.mean_fps(), fps),
            s.frame_count,
            pct(s.frame_count as f64, want),
            s.drop_count,
        ));
    }
    lines.push(format!("wall time {runtime:.1} s (limit 60 s)"));

    let disk: u64 = man.streams.iter().flat_map(|s| &s.chunks).map(|c| c.size_bytes).sum();
    let first = man.streams.iter().filter_map(|s| s.first_session_ts_ns).min().unwrap_or(0);
    let last = man.streams.iter().filter_map(|s| s.last_session_ts_ns).max().unwrap_or(0);
    let span = (last.saturating_sub(first) as f64 / 1e9).max(1e-9);
    let rate = disk as f64 / span / 1e6;
    let offered: f64 = man
        .streams
        .iter()
        .map(|s| dhub_core::payload_size(&s.setup.descriptor) as f64 * s.setup.descriptor.nominal_fps)
        .sum::<f64>()
        / 1e6;
    let ok3 = rate >= 40.0;
    let three = vec![
        format!("{:.2} GB on disk over {span:.1} s: {rate:.1} MB/s (target 80, hard floor 40)", disk as f64 / 1e9),
        format!("offered raw load {offered:.1} MB/s; target {}", if rate >= 80.0 { "met" } else { "not met" }),
    ];
    vec![(1, Outcome::new(ok1, lines)), (3, Outcome::new(ok3, three))]
}

// ---------------------------------------------------------------------------
// 2: 78 s simulated session

fn simulated_counts(seconds: f64, us_fps: f64, rgbd_fps: f64) -> BTreeMap<String, u64> {
    let clock = SimClock::new(0);
    let tmp = tempfile::tempdir().unwrap();
    let mut specs = vec![
        AdapterSpec::with_defaults(AdapterType::SimUs, 1, "a", 1),
        AdapterSpec::with_defaults(AdapterType::SimPose, 1, "a", 2),
        AdapterSpec::with_defaults(AdapterType::SimRgbd, 1, "b", 3),
    ];
    for s in &mut specs {
        if s.adapter_type == AdapterType::SimUs {
            s.fps = us_fps;
        } else if s.adapter_type == AdapterType::SimRgbd {
            s.fps = rgbd_fps;
        }
        for d in &mut s.descriptors {
            d.nominal_fps = s.fps;
            // counts do not depend on resolution
            if d.width > 0 {
                d.width = 32;
                d.height = 24;
            }
        }
    }
    let header = RecordingHeader {
        format_version: FORMAT_VERSION,
        session_name: "sim".into(),
        created_ts: 0,
        streams: specs
            .iter()
            .flat_map(|s| {
                s.descriptors.iter().map(|d| StreamSetup {
                    descriptor: d.clone(),
                    codec_id: RAW,
                    lossy: false,
                    simulated: Some(SimulatedSource { adapter_type: s.adapter_type, seed: s.seed, fps: s.fps }),
                })
            })
            .collect(),
        external_codecs: vec![],
    };
    let writer = Arc::new(Mutex::new(RecordingWriter::create(tmp.path(), header, ChunkLimits::default()).unwrap()));
    let sink: Arc<dyn FrameSink> = {
        let w = writer.clone();
        Arc::new(move |mut f: Frame| {
            f.session_ts_ns = f.capture_ts_ns;
            w.lock().append(&f).expect("append");
            Ok(())
        })
    };
    let handles: Vec<_> = specs.into_iter().map(|s| run_adapter(s, sink.clone(), clock.clone())).collect();
    clock.set((seconds * 1e9) as u64);
    for h in handles {
        h.stop();
    }
    drop(sink);
    let w = Arc::try_unwrap(writer).ok().expect("writer released").into_inner();
    w.finalize(&FinalizeInfo::default()).unwrap();
    assert!(verify(tmp.path()).is_clean());
    let rec = Recording::open(tmp.path()).unwrap();
    rec.manifest().streams.iter().map(|s| (s.setup.descriptor.name.clone(), s.frame_count)).collect()
}

fn reference_session() -> Outcome {
    let c = simulated_counts(78.0, 60.0, 30.0);
    let mut pass = true;
    let mut lines = Vec::new();
    for (name, want) in [("us", 4622.0), ("rgb", 2283.0), ("depth", 2283.0)] {
        let got = c[name] as f64;
        pass &= within(got, want, 0.02);
        lines.push(format!("{name}: {got} frames at nominal rate vs {want} ({:+.2}%, limit 2%)", pct(got, want)));
    }
    lines.push(format!("pose: {} frames (non-binding)", c["pose"]));
    let t = simulated_counts(78.0, 60.2, 29.6);
    lines.push(format!(
        "info, at the achieved rates 60.2/29.6: us {} ({:+.2}%), rgb {} ({:+.2}%), depth {} ({:+.2}%)",
        t["us"],
        pct(t["us"] as f64, 4622.0),
        t["rgb"],
        pct(t["rgb"] as f64, 2283.0),
        t["depth"],
        pct(t["depth"] as f64, 2283.0),
    ));
    Outcome::new(pass, lines)
}

// ---------------------------------------------------------------------------
// 4: codec

/// Lengths on a log scale up to `max`.
fn log_len(max: usize) -> impl Strategy<Value = usize> {
    (0u32..=20, any::<u64>()).prop_map(move |(bits, x)| (x as usize) % ((1usize << bits).min(max) + 1))
}

fn codec() -> Outcome {
    let reg = CodecRegistry::new();
    let mut lines = Vec::new();
    let mut pass = true;
    let mut check = |name: &str, r: Result<(), String>| {
        pass &= r.is_ok();
        lines.push(format!("{name}: {}", r.err().unwrap_or_else(|| "ok".into())));
    };

    let r = runner(10_000).run(&payload(), |x| {
        for id in [RAW, DRLE] {
            let enc = reg.encode(id, &x).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(&reg.decode(id, &enc, x.len()).map_err(|e| TestCaseError::fail(e.to_string()))?, &x);
        }
        Ok(())
    });
    check("10^4 round trips, RAW and DRLE", r.map_err(|e| e.to_string()));

    let r = runner(10_000).run(&(any::<u8>(), log_len(1_000_000).prop_map(|n| n.max(4))), |(v, n)| {
        let enc = drle::encode(&vec![v; n]);
        prop_assert!(enc.len() <= 2 + 2 * (n - 1).div_ceil(130), "n={} len={}", n, enc.len());
        Ok(())
    });
    let small = (4..2000usize).all(|n| [0u8, 1, 200].iter().all(|&v| drle::encode(&vec![v; n]).len() <= 2 + 2 * (n - 1).div_ceil(130)));
    check(
        "constant-buffer bound, 10^4 random plus every n < 2000",
        r.map_err(|e| e.to_string()).and_then(|_| if small { Ok(()) } else { Err("small n violated".into()) }),
    );

    let r = runner(10_000).run(&(any::<u64>(), log_len(100_000)), |(seed, n)| {
        let enc = drle::encode(&runless(seed, n));
        prop_assert!(enc.len() <= n + n.div_ceil(128));
        Ok(())
    });
    check("worst-case bound, 10^4 run-free inputs", r.map_err(|e| e.to_string()));

    let zero = vec![0u8; 6_220_800];
    let examples = [
        reg.encode(DRLE, &[5, 5, 5, 5]).unwrap() == [0x00, 0x05, 0x80, 0x00],
        reg.encode(DRLE, &zero).unwrap().len() == 95_706,
        matches!(reg.decode(DRLE, &[0x80], 3), Err(CodecError::Corrupt(_))),
    ];
    check(
        "hand-traced examples",
        if examples.iter().all(|&b| b) { Ok(()) } else { Err(format!("{examples:?}")) },
    );
    Outcome::new(pass, lines)
}

// ---------------------------------------------------------------------------
// 5: wire

fn wire() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;

    let mut cases = 0;
    let mut failed = None;
    for (k, ty) in MessageType::ALL.iter().enumerate() {
        let per = 10_000u32.div_ceil(13);
        let r = runner(per).run(&arb::message_of(k as u8), |m| {
            prop_assert_eq!(m.message_type(), *ty);
            let enc = encode_message(&m).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(decode_message(&enc).map_err(|e| TestCaseError::fail(e.to_string()))?, (m.clone(), enc.len()));
            prop_assert_eq!(
                decode_message_bytes(&Bytes::from(enc.clone()), u32::MAX).map_err(|e| TestCaseError::fail(e.to_string()))?,
                (m, enc.len())
            );
            Ok(())
        });
        cases += per;
        if let Err(e) = r {
            failed.get_or_insert(format!("{ty:?}: {e}"));
        }
    }
    pass &= failed.is_none();
    lines.push(format!("round trip: {cases} cases over all 13 types: {}", failed.unwrap_or_else(|| "ok".into())));

    let ping = encode_message(&Message::Ping(0x0123_4567_89AB_CDEF)).unwrap();
    let undetected = (0..ping.len() * 8)
        .filter(|&bit| {
            let mut b = ping.clone();
            b[bit / 8] ^= 1 << (bit % 8);
            decode_message(&b).is_ok()
        })
        .count();
    pass &= undetected == 0;
    lines.push(format!("single-bit flips on a {}-byte PING: {} flips, {undetected} undetected", ping.len(), ping.len() * 8));

    let mut rng = netsim::rng(5);
    let mut decoded = 0u64;
    let fuzz = catch_unwind(AssertUnwindSafe(|| {
        for i in 0..1_000_000u32 {
            let len = rng.gen_range(0..96usize);
            let mut b = vec![0u8; len];
            rng.fill_bytes(&mut b);
            if i % 2 == 1 {
                // well-formed envelope around a random body so payload parsers run
                let mut env = vec![b'D', b'H', 0x01, rng.gen_range(0..16u8)];
                env.extend_from_slice(&(len as u32).to_be_bytes());
                env.extend_from_slice(&b);
                let crc = crc32c::crc32c(&env);
                env.extend_from_slice(&crc.to_be_bytes());
                b = env;
            }
            if decode_message(&b).is_ok() {
                decoded += 1;
            }
            let _ = decode_message_bytes(&Bytes::from(b), 1 << 20);
        }
    }));
    pass &= fuzz.is_ok();
    lines.push(format!(
        "fuzz: 10^6 buffers, {}; {decoded} happened to decode",
        if fuzz.is_ok() { "no panic" } else { "PANICKED" }
    ));
    Outcome::new(pass, lines)
}

// ---------------------------------------------------------------------------
// 6: clock sync

fn clock_sync() -> Outcome {
    const TRIALS: usize = 1000;
    let mut rng = netsim::rng(6);
    let mut worst = 0i64;
    for _ in 0..TRIALS {
        let e = netsim::estimate(&Link::lan(5_000_000), 31e9, &mut rng);
        worst = worst.max((e.offset_ns + 5_000_000).abs());
    }
    let ok_a = worst < 200_000;

    // one event seen by two hubs, mapped to session time through each estimate
    let mut within_bound = 0;
    let mut worst_gap = 0u64;
    let event = 20e9;
    for _ in 0..TRIALS {
        let (off_a, off_b) = (5_000_000i64, -3_000_000i64);
        let ea = netsim::estimate(&Link::lan(off_a), 31e9, &mut rng);
        let eb = netsim::estimate(&Link::lan(off_b), 31e9, &mut rng);
        let sa = to_session_time((event + off_a as f64) as u64, &ea);
        let sb = to_session_time((event + off_b as f64) as u64, &eb);
        let gap = sa.abs_diff(sb);
        worst_gap = worst_gap.max(gap);
        if gap <= 2 * ea.dispersion_ns.max(eb.dispersion_ns) {
            within_bound += 1;
        }
    }
    let frac = within_bound as f64 / TRIALS as f64;
    let ok_b = frac >= 0.95;
    Outcome::new(
        ok_a && ok_b,
        vec![
            format!("offset error over {TRIALS} runs: max {:.3} ms (limit 0.2 ms): {}", worst as f64 / 1e6, if ok_a { "ok" } else { "FAIL" }),
            format!(
                "two-hub event: {:.1}% of {TRIALS} runs within 2 x dispersion (need 95%); worst gap {:.3} ms: {}",
                frac * 100.0,
                worst_gap as f64 / 1e6,
                if ok_b { "ok" } else { "FAIL" }
            ),
        ],
    )
}

// ---------------------------------------------------------------------------
// 7: alignment

fn alignment() -> Outcome {
    let mut instances = 0;
    let r = runner(200).run(&(align_instance(4, 1000), any::<prop::sample::Index>()), |(inst, m)| {
        let dir = tempfile::tempdir().unwrap();
        write_instance(dir.path(), &inst);
        let rec = Recording::open(dir.path()).unwrap();
        let master = m.index(inst.streams.len());
        prop_assert_eq!(cursor_alignment(&rec, inst.streams.len(), master), brute_force_alignment(&inst, master));
        Ok(())
    });
    instances += 200;
    Outcome::new(r.is_ok(), vec![format!("{instances} random instances: {}", r.err().map_or("ok".into(), |e| e.to_string()))])
}

// ---------------------------------------------------------------------------
// 8: state machines

fn hub_table(s: HubState, cmd: &str) -> Option<HubState> {
    use HubState::*;
    match (s, cmd) {
        (Idle | Ready, "CONFIGURE") => Some(Ready),
        (Ready, "START") => Some(Streaming),
        (Streaming, "STOP") => Some(Ready),
        (_, "RESET") => Some(Idle),
        (s, "STATUS") => Some(s),
        _ => None,
    }
}

fn session_table(s: SessionState, ev: &str) -> Option<SessionState> {
    use SessionState::*;
    match (s, ev) {
        (Idle | Configured | Complete | Error, "apply") => Some(Configured),
        (Configured, "start") => Some(Recording),
        (Recording, "stop") => Some(Finalizing),
        (Recording, "hub_lost" | "hub_recovered") => Some(Recording),
        (Recording | Finalizing, "write_failed") => Some(Error),
        (Finalizing, "finalized") => Some(Complete),
        _ => None,
    }
}

fn state_machines() -> Outcome {
    let mut mismatches = Vec::new();
    let mut rejected = 0;

    let streams = stream(AdapterType::SimPose, "a", 1, 200.0, &[RAW]);
    let hub_cfg = HubConfiguration {
        session_name: "s".into(),
        streams: streams.clone(),
        queue_capacity: 8,
        metrics_interval_ms: 500,
        external_codecs: vec![],
    };
    let cmds = [
        ControlCommand::Configure(hub_cfg),
        ControlCommand::Start,
        ControlCommand::Stop,
        ControlCommand::Reset,
        ControlCommand::Status,
    ];
    for s in HubState::ALL {
        for (i, cmd) in cmds.iter().enumerate() {
            let out = handle_control(s, "a", &ControlRequest { id: i as u64, command: cmd.clone() });
            match (hub_table(s, cmd.name()), &out.reply) {
                (Some(next), Message::ControlAck(a)) if a.state == next && out.state == next => {}
                (None, Message::Error(e)) if e.code == ErrorCode::BadTransition && out.state == s && out.effects.is_empty() => {
                    rejected += 1
                }
                _ => mismatches.push(format!("hub {s:?} x {}: {:?}", cmd.name(), out.reply)),
            }
        }
    }
    let hub_rejected = rejected;

    let cfg = SessionConfig {
        session_name: "s".into(),
        hubs: vec![HubAddress { hub_id: "a".into(), address: String::new() }],
        streams,
        storage_dir: "rec".into(),
        queue_capacity: 8,
        metrics_interval_ms: 500,
        external_codecs: vec![],
    };
    let ready: BTreeSet<String> = ["a".to_string()].into();
    let events = [
        SessionEvent::Apply(cfg.clone()),
        SessionEvent::Start { ready_hubs: ready },
        SessionEvent::Stop,
        SessionEvent::HubLost("a".into()),
        SessionEvent::HubRecovered("a".into()),
        SessionEvent::WriteFailed("disk".into()),
        SessionEvent::Finalized,
    ];
    for s in SessionState::ALL {
        let from = Session { state: s, config: Some(cfg.clone()), ..Session::default() };
        for ev in &events {
            let got = transition(&from, ev.clone());
            match (session_table(s, ev.name()), &got) {
                (Some(next), Ok((n, _))) if n.state == next => {}
                (None, Err(e)) if e.code() == "BAD_TRANSITION" => rejected += 1,
                _ => mismatches.push(format!("session {s:?} x {}: {got:?}", ev.name())),
            }
        }
        // start without ready hubs is refused in every state, never applied
        let got = transition(&from, SessionEvent::Start { ready_hubs: BTreeSet::new() });
        let want = if s == SessionState::Configured { "HUBS_NOT_READY" } else { "BAD_TRANSITION" };
        if got.as_ref().err().map(|e| e.code()) != Some(want) {
            mismatches.push(format!("session {s:?} x start(no hubs): {got:?}"));
        }
    }
    let mut lines = vec![
        format!("hub: 3 x 5 pairs, {hub_rejected} rejected with BAD_TRANSITION"),
        format!("session: 6 x 7 pairs, {} rejected with BAD_TRANSITION", rejected - hub_rejected),
    ];
    lines.extend(mismatches.iter().map(|m| format!("mismatch {m}")));
    Outcome::new(mismatches.is_empty(), lines)
}

// ---------------------------------------------------------------------------
// 9: crash safety

fn crash_safety() -> Outcome {
    let mut lines = Vec::new();
    let mut rng = netsim::rng(9);
    let lens: Vec<usize> = (0..300).map(|_| rng.gen_range(0..2000)).collect();
    let setup = StreamSetup { simulated: None, ..pose_setup(1) };
    let mut bad = Vec::new();
    for trial in 0..100 {
        let dir = tempfile::tempdir().unwrap();
        let header = RecordingHeader {
            format_version: FORMAT_VERSION,
            session_name: "crash".into(),
            created_ts: 1,
            streams: vec![setup.clone()],
            external_codecs: vec![],
        };
        let mut w = RecordingWriter::create(dir.path(), header, ChunkLimits { max_bytes: 1 << 30, max_duration_ns: u64::MAX }).unwrap();
        for (i, &n) in lens.iter().enumerate() {
            let payload: Vec<u8> = (0..n).map(|j| (i * 31 + j) as u8).collect();
            let f = Frame { stream_id: 1, seq: i as u64, capture_ts_ns: i as u64, session_ts_ns: i as u64, codec_id: RAW, payload: payload.into() };
            w.append(&f).unwrap();
        }
        w.finalize(&FinalizeInfo::default()).unwrap();
        let chunk = stream_dir(dir.path(), 1).join(chunk_file_name(0));
        let size = std::fs::metadata(&chunk).unwrap().len();
        let at = rng.gen_range(0..=size);
        std::fs::OpenOptions::new().write(true).open(&chunk).unwrap().set_len(at).unwrap();

        let expect = intact_records(&lens, at);
        let (report, man) = repair(dir.path()).unwrap();
        let rec = Recording::open(dir.path()).unwrap();
        let ix = rec.index(1).unwrap();
        let kept: Vec<_> = ix.iter().map(|e| rec.read_encoded(1, e).unwrap()).collect();
        let exact = kept.len() == expect
            && kept.iter().enumerate().all(|(i, f)| f.seq == i as u64 && f.payload.len() == lens[i] && f.payload.iter().enumerate().all(|(j, &b)| b == (i * 31 + j) as u8));
        if report.recovered[&1] != expect as u64 || man.streams[0].frame_count != expect as u64 || !exact || !verify(dir.path()).is_clean() {
            bad.push(format!("trial {trial}: cut at {at}, kept {} of {expect}", report.recovered[&1]));
        }
    }
    lines.push(format!("100 truncations of a {}-record chunk: {} mismatches", lens.len(), bad.len()));
    lines.extend(bad.iter().take(5).cloned());

    let codes = cli_exit_codes();
    let cli_ok = codes.iter().all(|(_, want, got)| want == got);
    for (case, want, got) in &codes {
        lines.push(format!("dhub rec verify, {case}: exit {got} (want {want})"));
    }
    Outcome::new(bad.is_empty() && cli_ok, lines)
}

fn dhub_exit(storage: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_dhub"))
        .arg("--storage")
        .arg(storage)
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .unwrap()
        .code()
        .unwrap_or(-1)
}

fn cli_exit_codes() -> Vec<(&'static str, i32, i32)> {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path();
    let mut out = Vec::new();
    write_sim(&s.join("clean"), &[pose_setup(1), small_us_setup(2)], 40);
    out.push(("clean recording", 0, dhub_exit(s, &["rec", "verify", "clean"])));
    out.push(("unknown recording", 1, dhub_exit(s, &["rec", "verify", "nope"])));
    out.push(("missing argument", 2, dhub_exit(s, &["rec", "verify"])));

    write_sim(&s.join("flip"), &[pose_setup(1)], 40);
    let chunk = stream_dir(&s.join("flip"), 1).join(chunk_file_name(0));
    let mut b = std::fs::read(&chunk).unwrap();
    b[12 + 3 * (34 + 56) + 40] ^= 0x10;
    std::fs::write(&chunk, b).unwrap();
    out.push(("flipped payload bit", 3, dhub_exit(s, &["rec", "verify", "flip"])));
    out.push(("flipped payload bit, --repair", 0, dhub_exit(s, &["rec", "verify", "flip", "--repair"])));

    write_sim(&s.join("cut"), &[pose_setup(1)], 40);
    let chunk = stream_dir(&s.join("cut"), 1).join(chunk_file_name(0));
    let len = std::fs::metadata(&chunk).unwrap().len();
    std::fs::OpenOptions::new().write(true).open(&chunk).unwrap().set_len(len - 7).unwrap();
    out.push(("truncated chunk", 3, dhub_exit(s, &["rec", "verify", "cut"])));

    let header = RecordingHeader {
        format_version: FORMAT_VERSION,
        session_name: "partial".into(),
        created_ts: 1,
        streams: vec![pose_setup(1)],
        external_codecs: vec![],
    };
    let mut w = RecordingWriter::create(&s.join("partial"), header, ChunkLimits::default()).unwrap();
    for seq in 0..10 {
        w.append(&common::sim_frame(&pose_setup(1), seq, seq * 5_000_000)).unwrap();
    }
    drop(w);
    out.push(("partial recording", 3, dhub_exit(s, &["rec", "verify", "partial"])));
    out.push(("partial recording, --repair", 0, dhub_exit(s, &["rec", "verify", "partial", "--repair"])));
    out.push(("after repair", 0, dhub_exit(s, &["rec", "verify", "partial"])));
    out
}

// ---------------------------------------------------------------------------

type Criterion = (&'static [u8], &'static str, fn() -> Vec<(u8, Outcome)>);

fn main() {
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 8] = [
        (&[1, 3], "desk-scale session and throughput", desk_session),
        (&[2], "reference session counts", || vec![(2, reference_session())]),
        (&[4], "codec properties", || vec![(4, codec())]),
        (&[5], "wire protocol", || vec![(5, wire())]),
        (&[6], "clock sync", || vec![(6, clock_sync())]),
        (&[7], "alignment oracle", || vec![(7, alignment())]),
        (&[8], "state machines", || vec![(8, state_machines())]),
        (&[9], "crash safety", || vec![(9, crash_safety())]),
    ];
    let names: BTreeMap<u8, &str> = [
        (1, "desk-scale session"),
        (2, "reference session counts"),
        (3, "throughput"),
        (4, "codec properties"),
        (5, "wire protocol"),
        (6, "clock sync"),
        (7, "alignment oracle"),
        (8, "state machines"),
        (9, "crash safety"),
    ]
    .into();

    let mut results: BTreeMap<u8, Outcome> = BTreeMap::new();
    for (ids, label, run) in criteria {
        if !only.is_empty() && !ids.iter().any(|i| only.contains(i)) {
            continue;
        }
        let t = Instant::now();
        eprintln!("running {label} ...");
        match catch_unwind(run) {
            Ok(outs) => results.extend(outs),
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                for &i in ids {
                    results.insert(i, Outcome::new(false, vec![format!("panicked: {}", msg.clone().unwrap_or_default())]));
                }
            }
        }
        eprintln!("  {label} took {:.1} s", t.elapsed().as_secs_f64());
    }

    println!();
    for (i, o) in &results {
        println!("criterion {i} {}: {}", names[i], if o.pass { "PASS" } else { "FAIL" });
        for l in &o.lines {
            println!("    {l}");
        }
    }
    let failed: Vec<_> = results.iter().filter(|(_, o)| !o.pass).map(|(i, _)| i.to_string()).collect();
    println!(
        "\nacceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
