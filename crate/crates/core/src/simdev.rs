//! Device adapters and the deterministic simulated sensor suite: an
//! ultrasound scanner (RGB 1080p), an optical pose tracker and an RGB-D
//! camera (RGB + depth, lock-stepped).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, StopSignal};
use crate::codec;
use crate::types::{
    AdapterType, Frame, PixelFormat, PortKind, Pose, StreamConfig, StreamDescriptor, StreamKind,
};

pub const FRAME_MAGIC: &[u8; 4] = b"SIMF";
const XORSHIFT_MUL: u64 = 0x2545_F491_4F6C_DD1D;
const DEPTH_MIN_MM: u16 = 400;
const DEPTH_SPAN: u64 = 1648;

pub const TRAJ_RADIUS_M: f64 = 0.15;
pub const TRAJ_HEIGHT_M: f64 = 0.40;
pub const TRAJ_AMPLITUDE_M: f64 = 0.02;
pub const TRAJ_OMEGA: f64 = 0.5;

/// xorshift64* generator; bytes are taken high byte first.
#[derive(Debug, Clone)]
pub struct XorShift64Star(u64);

impl XorShift64Star {
    pub fn new(state: u64) -> Self {
        XorShift64Star(state)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(XORSHIFT_MUL)
    }

    pub fn fill(&mut self, out: &mut [u8]) {
        let mut chunks = out.chunks_exact_mut(8);
        for chunk in &mut chunks {
            chunk.copy_from_slice(&self.next_u64().to_be_bytes());
        }
        let rest = chunks.into_remainder();
        if !rest.is_empty() {
            let v = self.next_u64().to_be_bytes();
            rest.copy_from_slice(&v[..rest.len()]);
        }
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn image_into(prng_seed: u64, seq: u64, out: &mut [u8]) {
    out[..4].copy_from_slice(FRAME_MAGIC);
    out[4..12].copy_from_slice(&seq.to_be_bytes());
    XorShift64Star::new(prng_seed).fill(&mut out[12..]);
}

/// Synthetic ultrasound frame: `"SIMF"`, the big-endian seq, then
/// pseudo-random bytes seeded with `seed ^ seq`.
pub fn generate_us_frame(seed: u64, seq: u64, width: u32, height: u32) -> Vec<u8> {
    let len = width as usize * height as usize * 3;
    assert!(len >= 16, "frame too small for the SIMF header");
    let mut out = vec![0u8; len];
    image_into(seed ^ seq, seq, &mut out);
    out
}

/// Point on the parametric tracker trajectory at `t_seconds`.
pub fn generate_pose(_seed: u64, t_seconds: f64) -> Pose {
    let a = TRAJ_OMEGA * t_seconds;
    Pose {
        position: [
            TRAJ_RADIUS_M * a.cos(),
            TRAJ_RADIUS_M * a.sin(),
            TRAJ_HEIGHT_M + TRAJ_AMPLITUDE_M * (2.0 * a).sin(),
        ],
        orientation: [(a / 2.0).cos(), 0.0, 0.0, (a / 2.0).sin()],
    }
}

fn depth_into(seq: u64, width: u32, height: u32, out: &mut [u8]) {
    let w = width as usize;
    for (y, row) in out.chunks_exact_mut(w * 2).take(height as usize).enumerate() {
        let mut v = ((y as u64 + seq) % DEPTH_SPAN) as u16;
        for px in row.chunks_exact_mut(2) {
            px.copy_from_slice(&(DEPTH_MIN_MM + v).to_be_bytes());
            v += 1;
            if v as u64 == DEPTH_SPAN {
                v = 0;
            }
        }
    }
}

/// Depth in millimetres at pixel (x, y) of frame `seq`.
pub fn depth_at(x: u32, y: u32, seq: u64) -> u16 {
    DEPTH_MIN_MM + ((x as u64 + y as u64 + seq) % DEPTH_SPAN) as u16
}

/// RGB and depth payloads of one RGB-D capture.
pub fn generate_rgbd_frame(seed: u64, seq: u64, width: u32, height: u32) -> (Vec<u8>, Vec<u8>) {
    let n = width as usize * height as usize;
    assert!(n * 3 >= 16, "frame too small for the SIMF header");
    let mut rgb = vec![0u8; n * 3];
    image_into(seed ^ seq.wrapping_add(1 << 63), seq, &mut rgb);
    let mut depth = vec![0u8; n * 2];
    depth_into(seq, width, height, &mut depth);
    (rgb, depth)
}

/// Regenerates the payload an adapter produced for `stream` at `seq`.
pub fn expected_payload(adapter: AdapterType, seed: u64, fps: f64, desc: &StreamDescriptor, seq: u64) -> Vec<u8> {
    match (adapter, desc.kind) {
        (AdapterType::SimUs, _) => generate_us_frame(seed, seq, desc.width, desc.height),
        (AdapterType::SimPose, _) => generate_pose(seed, pose_time(seq, fps)).to_bytes().to_vec(),
        (AdapterType::SimRgbd, StreamKind::ImageDepth) => {
            let mut out = vec![0u8; desc.width as usize * desc.height as usize * 2];
            depth_into(seq, desc.width, desc.height, &mut out);
            out
        }
        (AdapterType::SimRgbd, _) => {
            let mut out = vec![0u8; desc.width as usize * desc.height as usize * 3];
            image_into(seed ^ seq.wrapping_add(1 << 63), seq, &mut out);
            out
        }
    }
}

/// Trajectory time of pose sample `seq`: the ideal tick time.
pub fn pose_time(seq: u64, fps: f64) -> f64 {
    seq as f64 / fps
}

/// One simulated device and the stream(s) it feeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub adapter_type: AdapterType,
    pub seed: u64,
    pub fps: f64,
    #[serde(default)]
    pub jitter_ppm: u32,
    /// One descriptor, or RGB then depth for `SIM_RGBD`.
    pub descriptors: Vec<StreamDescriptor>,
}

impl AdapterSpec {
    /// Device defaults: US 1920x1080 RGB8 @ 60, pose @ 200, RGB-D 1280x720 @ 30.
    pub fn with_defaults(adapter_type: AdapterType, seed: u64, hub: &str, first_stream_id: u32) -> AdapterSpec {
        let d = |id: u32, name: &str, kind, w, h, fmt, fps, port| StreamDescriptor {
            stream_id: id,
            name: name.to_string(),
            kind,
            width: w,
            height: h,
            pixel_format: fmt,
            nominal_fps: fps,
            source_hub: hub.to_string(),
            source_port_kind: port,
        };
        let (fps, descriptors) = match adapter_type {
            AdapterType::SimUs => (
                60.0,
                vec![d(first_stream_id, "us", StreamKind::ImageRgb, 1920, 1080, PixelFormat::Rgb8, 60.0, PortKind::HdmiIn)],
            ),
            AdapterType::SimPose => (
                200.0,
                vec![d(first_stream_id, "pose", StreamKind::Pose, 0, 0, PixelFormat::None, 200.0, PortKind::Ethernet)],
            ),
            AdapterType::SimRgbd => (
                30.0,
                vec![
                    d(first_stream_id, "rgb", StreamKind::ImageRgb, 1280, 720, PixelFormat::Rgb8, 30.0, PortKind::UsbC),
                    d(first_stream_id + 1, "depth", StreamKind::ImageDepth, 1280, 720, PixelFormat::Depth16, 30.0, PortKind::UsbC),
                ],
            ),
        };
        AdapterSpec { adapter_type, seed, fps, jitter_ppm: 0, descriptors }
    }

    /// Groups validated stream configs into adapter instances. RGB-D streams
    /// sharing a device key become one adapter with RGB first.
    pub fn from_streams(streams: &[StreamConfig]) -> Vec<AdapterSpec> {
        let mut groups: BTreeMap<String, Vec<&StreamConfig>> = BTreeMap::new();
        for s in streams {
            groups.entry(s.device_key()).or_default().push(s);
        }
        let mut out: Vec<AdapterSpec> = groups
            .into_values()
            .map(|mut members| {
                members.sort_by_key(|s| (s.descriptor.kind != StreamKind::ImageRgb, s.descriptor.stream_id));
                let first = members[0];
                AdapterSpec {
                    adapter_type: first.adapter.adapter_type,
                    seed: first.adapter.seed,
                    fps: first.effective_fps(),
                    jitter_ppm: first.adapter.jitter_ppm,
                    descriptors: members.iter().map(|s| s.descriptor.clone()).collect(),
                }
            })
            .collect();
        out.sort_by_key(|a| a.descriptors[0].stream_id);
        out
    }

    pub fn period_ns(&self) -> f64 {
        1e9 / self.fps
    }

    /// Nominal time of tick `seq` (ticks start one period after `start_ns`).
    pub fn tick_time(&self, start_ns: u64, seq: u64) -> u64 {
        start_ns + ((seq + 1) as f64 * self.period_ns()).round() as u64
    }

    fn jitter_ns(&self, seq: u64) -> i64 {
        if self.jitter_ppm == 0 {
            return 0;
        }
        let mut rng = XorShift64Star::new(self.seed ^ seq ^ 0x6A09_E667_F3BC_C908);
        let u = rng.next_f64() * 2.0 - 1.0;
        (u * self.period_ns() * self.jitter_ppm as f64 / 1e6).round() as i64
    }

    /// Frames of tick `seq` scheduled at `tick_ns`; a pure function of its inputs.
    pub fn frames_for_tick(&self, seq: u64, tick_ns: u64) -> Vec<Frame> {
        let capture_ts_ns = (tick_ns as i128 + self.jitter_ns(seq) as i128).max(0) as u64;
        let frame = |desc: &StreamDescriptor, payload: Vec<u8>| Frame {
            stream_id: desc.stream_id,
            seq,
            capture_ts_ns,
            session_ts_ns: 0,
            codec_id: codec::RAW,
            payload: Bytes::from(payload),
        };
        match self.adapter_type {
            AdapterType::SimUs => {
                let d = &self.descriptors[0];
                vec![frame(d, generate_us_frame(self.seed, seq, d.width, d.height))]
            }
            AdapterType::SimPose => {
                let pose = generate_pose(self.seed, pose_time(seq, self.fps));
                vec![frame(&self.descriptors[0], pose.to_bytes().to_vec())]
            }
            AdapterType::SimRgbd => {
                let d = &self.descriptors[0];
                let (rgb, depth) = generate_rgbd_frame(self.seed, seq, d.width, d.height);
                vec![frame(d, rgb), frame(&self.descriptors[1], depth)]
            }
        }
    }
}

/// Returned by a sink that refuses a frame (e.g. a full drop-newest queue).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejected;

pub trait FrameSink: Send + Sync {
    fn accept(&self, frame: Frame) -> Result<(), Rejected>;

    /// Tick `seq` of `stream_id` was skipped because the adapter fell behind.
    fn missed(&self, _stream_id: u32, _seq: u64) {}
}

impl<F> FrameSink for F
where
    F: Fn(Frame) -> Result<(), Rejected> + Send + Sync,
{
    fn accept(&self, frame: Frame) -> Result<(), Rejected> {
        self(frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdapterState {
    Stopped,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterReport {
    /// Ticks emitted; each stream of the adapter received this many frames.
    pub frames_emitted: u64,
    pub rejected: u64,
    /// Ticks skipped on a real-time clock because generation fell behind.
    pub missed: u64,
}

#[derive(Debug, Default)]
struct Counters {
    emitted: AtomicU64,
    rejected: AtomicU64,
    missed: AtomicU64,
    running: AtomicBool,
}

pub struct AdapterHandle {
    spec: AdapterSpec,
    clock: Arc<dyn Clock>,
    stop: Arc<StopSignal>,
    counters: Arc<Counters>,
    thread: Option<JoinHandle<()>>,
}

impl AdapterHandle {
    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn state(&self) -> AdapterState {
        if self.counters.running.load(Ordering::Acquire) {
            AdapterState::Running
        } else {
            AdapterState::Stopped
        }
    }

    pub fn frames_emitted(&self) -> u64 {
        self.counters.emitted.load(Ordering::Acquire)
    }

    pub fn rejected(&self) -> u64 {
        self.counters.rejected.load(Ordering::Acquire)
    }

    pub fn missed(&self) -> u64 {
        self.counters.missed.load(Ordering::Acquire)
    }

    /// Stops the tick loop. Ticks scheduled at or before the current clock
    /// time are still emitted; nothing later is.
    pub fn stop(mut self) -> AdapterReport {
        self.halt();
        AdapterReport { frames_emitted: self.frames_emitted(), rejected: self.rejected(), missed: self.missed() }
    }

    fn halt(&mut self) {
        self.stop.stop(self.clock.now_ns());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.counters.running.store(false, Ordering::Release);
    }
}

impl Drop for AdapterHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// How far behind schedule a live adapter may run before it skips ticks.
pub const MAX_LATENESS_NS: u64 = 100_000_000;

/// Starts the adapter's tick loop on its own thread. The first tick is one
/// period after the current clock time; `seq` counts up from 0. On a
/// real-time clock a tick more than [`MAX_LATENESS_NS`] (or one period, if
/// longer) overdue is skipped: its seq is consumed and reported through
/// [`FrameSink::missed`], so a generator slower than its rate drops frames
/// instead of building a backlog.
pub fn run_adapter(spec: AdapterSpec, sink: Arc<dyn FrameSink>, clock: Arc<dyn Clock>) -> AdapterHandle {
    let start_ns = clock.now_ns();
    let stop = StopSignal::new();
    let counters = Arc::new(Counters::default());
    counters.running.store(true, Ordering::Release);

    let thread = {
        let spec = spec.clone();
        let clock = clock.clone();
        let stop = stop.clone();
        let counters = counters.clone();
        std::thread::Builder::new()
            .name(format!("adapter-{}", spec.descriptors[0].stream_id))
            .spawn(move || {
                let late_ns = (spec.period_ns().ceil() as u64).max(MAX_LATENESS_NS);
                let mut seq = 0u64;
                loop {
                    let tick = spec.tick_time(start_ns, seq);
                    match stop.stopped_at() {
                        Some(at) if tick > at => break,
                        Some(_) => {}
                        None => {
                            if !clock.sleep_until(tick, &stop) {
                                continue;
                            }
                        }
                    }
                    if clock.is_realtime() && clock.now_ns() > tick + late_ns {
                        for d in &spec.descriptors {
                            sink.missed(d.stream_id, seq);
                        }
                        counters.missed.fetch_add(1, Ordering::AcqRel);
                        seq += 1;
                        continue;
                    }
                    for frame in spec.frames_for_tick(seq, tick) {
                        if sink.accept(frame).is_err() {
                            counters.rejected.fetch_add(1, Ordering::AcqRel);
                        }
                    }
                    counters.emitted.fetch_add(1, Ordering::AcqRel);
                    seq += 1;
                }
            })
            .expect("spawn adapter thread")
    };

    AdapterHandle { spec, clock, stop, counters, thread: Some(thread) }
}
