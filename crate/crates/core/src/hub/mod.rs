//! Hub runtime: adapters feed per-stream drop-oldest queues, one publisher
//! thread per stream encodes and ships frames, and a pure control table
//! ([`handle_control`]) drives the lifecycle.

mod daemon;
mod queue;
mod state;

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::clock::Clock;
use crate::clocksync::{to_session_time, ClockEstimator, OffsetEstimate, SyncSample};
use crate::codec::CodecRegistry;
use crate::simdev::{run_adapter, AdapterHandle, AdapterSpec, FrameSink, Rejected};
use crate::types::{mean_fps_at, Frame, HubState, StreamConfig};
use crate::wire::{
    ControlRequest, ErrorCode, ErrorReport, FrameWriter, HubConfiguration, HubMetrics, Message, StreamMetrics,
    FLAG_SESSION_TS_VALID,
};

pub use daemon::{run_hub, HubDaemon, HubOptions};
pub use queue::DropOldestQueue;
pub use state::{configuration_violations, handle_control, ControlOutcome, HubEffect};

/// How long a stopping publisher keeps draining its queue.
pub const DRAIN_GRACE: Duration = Duration::from_secs(2);
const FPS_WINDOW_NS: u64 = 1_000_000_000;

/// Where encoded FRAME messages go.
pub trait Transport: Send + Sync {
    /// Sends one encoded message. An error means the frame was lost.
    fn send_frame(&self, bytes: &[u8]) -> std::io::Result<()>;
    fn is_connected(&self) -> bool;
}

#[derive(Debug, Default)]
pub struct StreamCounters {
    pub captured: AtomicU64,
    pub published: AtomicU64,
    pub dropped: AtomicU64,
    pub bytes_encoded: AtomicU64,
    recent: Mutex<VecDeque<u64>>,
}

/// One configured stream: its queue, counters and subscription flag.
pub struct StreamPipeline {
    pub config: StreamConfig,
    pub queue: DropOldestQueue<Frame>,
    pub counters: StreamCounters,
    subscribed: AtomicBool,
}

impl StreamPipeline {
    pub fn new(config: StreamConfig, capacity: usize) -> Self {
        StreamPipeline {
            config,
            queue: DropOldestQueue::new(capacity),
            counters: StreamCounters::default(),
            subscribed: AtomicBool::new(true),
        }
    }

    pub fn stream_id(&self) -> u32 {
        self.config.descriptor.stream_id
    }

    /// Enqueues a captured frame, evicting (and counting) the oldest on overflow.
    pub fn capture(&self, frame: Frame) {
        let ts = frame.capture_ts_ns;
        {
            let mut r = self.counters.recent.lock();
            r.push_back(ts);
            while r.front().is_some_and(|&t| t + 2 * FPS_WINDOW_NS < ts) {
                r.pop_front();
            }
        }
        self.counters.captured.fetch_add(1, Ordering::AcqRel);
        if self.queue.push(frame).is_some() {
            self.counters.dropped.fetch_add(1, Ordering::AcqRel);
        }
    }

    pub fn set_subscribed(&self, on: bool) {
        self.subscribed.store(on, Ordering::Release);
    }

    pub fn is_subscribed(&self) -> bool {
        self.subscribed.load(Ordering::Acquire)
    }

    pub fn metrics(&self, now_ns: u64) -> StreamMetrics {
        let recent: Vec<u64> = {
            let r = self.counters.recent.lock();
            let mut v: Vec<u64> = r.iter().copied().collect();
            v.sort_unstable();
            v
        };
        StreamMetrics {
            stream_id: self.stream_id(),
            captured: self.counters.captured.load(Ordering::Acquire),
            published: self.counters.published.load(Ordering::Acquire),
            dropped: self.counters.dropped.load(Ordering::Acquire),
            bytes_encoded: self.counters.bytes_encoded.load(Ordering::Acquire),
            fps_1s: mean_fps_at(&recent, FPS_WINDOW_NS as i64, now_ns).unwrap_or(0.0),
            queue_depth: self.queue.len() as u64,
        }
    }
}

/// Routes adapter output to the pipeline of each frame's stream.
struct PipelineSink(BTreeMap<u32, Arc<StreamPipeline>>);

impl FrameSink for PipelineSink {
    fn accept(&self, frame: Frame) -> Result<(), Rejected> {
        match self.0.get(&frame.stream_id) {
            Some(p) => {
                p.capture(frame);
                Ok(())
            }
            None => Err(Rejected),
        }
    }

    fn missed(&self, stream_id: u32, _seq: u64) {
        if let Some(p) = self.0.get(&stream_id) {
            p.counters.dropped.fetch_add(1, Ordering::AcqRel);
        }
    }
}

const RUN: u8 = 0;
const DRAIN: u8 = 1;
const ABORT: u8 = 2;

struct Publisher {
    mode: Arc<AtomicU8>,
    thread: JoinHandle<()>,
}

struct ControlState {
    state: HubState,
    config: Option<HubConfiguration>,
    registry: Arc<CodecRegistry>,
    adapters: Vec<AdapterHandle>,
    publishers: Vec<Publisher>,
}

/// Everything a hub does apart from networking.
pub struct HubCore {
    hub_id: String,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    estimator: Mutex<ClockEstimator>,
    control: Mutex<ControlState>,
    pipelines: RwLock<Arc<BTreeMap<u32, Arc<StreamPipeline>>>>,
}

impl HubCore {
    pub fn new(hub_id: &str, clock: Arc<dyn Clock>, transport: Arc<dyn Transport>) -> Arc<HubCore> {
        Arc::new(HubCore {
            hub_id: hub_id.to_string(),
            clock,
            transport,
            estimator: Mutex::new(ClockEstimator::default()),
            control: Mutex::new(ControlState {
                state: HubState::Idle,
                config: None,
                registry: Arc::new(CodecRegistry::new()),
                adapters: Vec::new(),
                publishers: Vec::new(),
            }),
            pipelines: RwLock::new(Arc::new(BTreeMap::new())),
        })
    }

    pub fn hub_id(&self) -> &str {
        &self.hub_id
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn state(&self) -> HubState {
        self.control.lock().state
    }

    pub fn pipelines(&self) -> Arc<BTreeMap<u32, Arc<StreamPipeline>>> {
        self.pipelines.read().clone()
    }

    pub fn clock_estimate(&self) -> Option<OffsetEstimate> {
        self.estimator.lock().current()
    }

    pub fn add_sync_sample(&self, sample: SyncSample) -> Option<OffsetEstimate> {
        self.estimator.lock().push(sample)
    }

    /// Applies a control request and returns the reply to send.
    pub fn handle(self: &Arc<Self>, req: &ControlRequest) -> Message {
        let mut ctl = self.control.lock();
        let outcome = handle_control(ctl.state, &self.hub_id, req);
        for effect in outcome.effects {
            if let Err(e) = self.apply(&mut ctl, effect) {
                tracing::error!(hub = %self.hub_id, "control effect failed: {e}");
                self.tear_down(&mut ctl);
                ctl.state = HubState::Idle;
                return Message::Error(ErrorReport { id: Some(req.id), code: ErrorCode::Internal, message: e });
            }
        }
        if ctl.state != outcome.state {
            tracing::info!(hub = %self.hub_id, "{:?} -> {:?}", ctl.state, outcome.state);
        }
        ctl.state = outcome.state;
        outcome.reply
    }

    fn apply(self: &Arc<Self>, ctl: &mut ControlState, effect: HubEffect) -> Result<(), String> {
        match effect {
            HubEffect::InstallConfig(cfg) => {
                ctl.registry = Arc::new(CodecRegistry::with_external(&cfg.external_codecs).map_err(|e| e.to_string())?);
                self.install_pipelines(&cfg);
                ctl.config = Some(cfg);
            }
            HubEffect::StartAdapters => {
                let cfg = ctl.config.clone().ok_or("no configuration")?;
                Self::join_publishers(ctl, ABORT);
                // every run starts from fresh counters and empty queues
                let pipelines = self.install_pipelines(&cfg);
                for p in pipelines.values() {
                    let mode = Arc::new(AtomicU8::new(RUN));
                    let thread = {
                        let core = self.clone();
                        let p = p.clone();
                        let mode = mode.clone();
                        let registry = ctl.registry.clone();
                        std::thread::Builder::new()
                            .name(format!("publish-{}", p.stream_id()))
                            .spawn(move || core.publish_loop(&p, &registry, &mode))
                            .map_err(|e| e.to_string())?
                    };
                    ctl.publishers.push(Publisher { mode, thread });
                }
                let sink: Arc<dyn FrameSink> = Arc::new(PipelineSink((*pipelines).clone()));
                for spec in AdapterSpec::from_streams(&cfg.streams) {
                    ctl.adapters.push(run_adapter(spec, sink.clone(), self.clock.clone()));
                }
            }
            HubEffect::StopAdapters => {
                for a in ctl.adapters.drain(..) {
                    a.stop();
                }
                for p in &ctl.publishers {
                    p.mode.store(DRAIN, Ordering::Release);
                }
            }
            HubEffect::TearDown => self.tear_down(ctl),
        }
        Ok(())
    }

    fn install_pipelines(&self, cfg: &HubConfiguration) -> Arc<BTreeMap<u32, Arc<StreamPipeline>>> {
        let map: BTreeMap<u32, Arc<StreamPipeline>> = cfg
            .streams
            .iter()
            .map(|s| (s.descriptor.stream_id, Arc::new(StreamPipeline::new(s.clone(), cfg.queue_capacity))))
            .collect();
        let map = Arc::new(map);
        *self.pipelines.write() = map.clone();
        map
    }

    fn tear_down(&self, ctl: &mut ControlState) {
        for a in ctl.adapters.drain(..) {
            a.stop();
        }
        Self::join_publishers(ctl, ABORT);
        ctl.config = None;
        ctl.registry = Arc::new(CodecRegistry::new());
        *self.pipelines.write() = Arc::new(BTreeMap::new());
    }

    fn join_publishers(ctl: &mut ControlState, mode: u8) {
        for p in &ctl.publishers {
            p.mode.store(mode, Ordering::Release);
        }
        for p in ctl.publishers.drain(..) {
            let _ = p.thread.join();
        }
    }

    /// Waits for publishers to finish draining after STOP.
    pub fn wait_drained(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let done = self.control.lock().publishers.iter().all(|p| p.thread.is_finished());
            if done {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Stops everything; used on shutdown.
    pub fn shutdown(&self) {
        let mut ctl = self.control.lock();
        self.tear_down(&mut ctl);
        ctl.state = HubState::Idle;
    }

    pub fn set_subscription(&self, stream_ids: &[u32], on: bool) {
        let pipelines = self.pipelines();
        for id in stream_ids {
            if let Some(p) = pipelines.get(id) {
                p.set_subscribed(on);
            }
        }
    }

    pub fn metrics(&self) -> HubMetrics {
        let now = self.clock.now_ns();
        HubMetrics {
            hub_id: self.hub_id.clone(),
            state: self.state(),
            ts_ns: now,
            streams: self.pipelines().values().map(|p| p.metrics(now)).collect(),
            clock: self.clock_estimate(),
        }
    }

    /// Encodes `frame` as a FRAME message into `buf`; returns the encoded data length.
    pub fn encode_frame(&self, p: &StreamPipeline, registry: &CodecRegistry, mut frame: Frame, buf: &mut Vec<u8>) -> Result<usize, String> {
        frame.codec_id = p.config.codec_id;
        let flags = match self.clock_estimate() {
            Some(est) => {
                frame.session_ts_ns = to_session_time(frame.capture_ts_ns, &est);
                FLAG_SESSION_TS_VALID
            }
            None => {
                frame.session_ts_ns = 0;
                0
            }
        };
        buf.clear();
        let mut w = FrameWriter::begin(buf, &frame, flags);
        let start = w.data().len();
        registry.encode_into(frame.codec_id, &frame.payload, w.data()).map_err(|e| e.to_string())?;
        let n = w.data().len() - start;
        w.finish().map_err(|e| e.to_string())?;
        Ok(n)
    }

    fn publish_loop(&self, p: &StreamPipeline, registry: &CodecRegistry, mode: &AtomicU8) {
        let mut buf = Vec::new();
        let mut drain_since: Option<Instant> = None;
        loop {
            let m = mode.load(Ordering::Acquire);
            if m == ABORT {
                break;
            }
            if m == DRAIN {
                let since = *drain_since.get_or_insert_with(Instant::now);
                if since.elapsed() >= DRAIN_GRACE || p.queue.is_empty() {
                    break;
                }
            }
            if !self.transport.is_connected() {
                std::thread::sleep(Duration::from_millis(10));
                continue;
            }
            let Some(frame) = p.queue.pop_timeout(Duration::from_millis(20)) else {
                continue;
            };
            if !p.is_subscribed() {
                p.counters.dropped.fetch_add(1, Ordering::AcqRel);
                continue;
            }
            let sent = self
                .encode_frame(p, registry, frame, &mut buf)
                .and_then(|n| self.transport.send_frame(&buf).map(|_| n).map_err(|e| e.to_string()));
            match sent {
                Ok(n) => {
                    p.counters.bytes_encoded.fetch_add(n as u64, Ordering::AcqRel);
                    p.counters.published.fetch_add(1, Ordering::AcqRel);
                }
                Err(e) => {
                    tracing::debug!(stream = p.stream_id(), "frame lost: {e}");
                    p.counters.dropped.fetch_add(1, Ordering::AcqRel);
                }
            }
        }
    }
}

impl Drop for HubCore {
    fn drop(&mut self) {
        let mut ctl = self.control.lock();
        for a in ctl.adapters.drain(..) {
            a.stop();
        }
        Self::join_publishers(&mut ctl, ABORT);
    }
}
