//! Supervisor: hub registry, session lifecycle, clock-sync server, recorder
//! sink and the HTTP control API.
//!
//! Hubs dial in over TCP. Each connection gets its own thread; FRAME traffic
//! is routed to one writer thread per stream. Session transitions are
//! serialized by a single lock, and every transition is published on the
//! event channel while that lock is held, so observers see them in order.

mod api;
mod recorder;
mod session;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::clock::{monotonic_now_ns, StopSignal};
use crate::clocksync::{to_session_time, OffsetEstimate};
use crate::codec::CodecRegistry;
use crate::record::{
    list_recordings, ChunkLimits, FinalizeInfo, Recording, RecordError, RecordingHeader, RecordingManifest,
    RecordingSummary, RecordingWriter, SimulatedSource, StreamSetup, FORMAT_VERSION,
};
use crate::types::{
    validate_session_config, AdapterStatus, HubInfo, HubState, SessionConfig, Violation,
};
use crate::wire::{
    encode_message, ConnectionRole, ControlCommand, ControlRequest, FrameMessage, HubConfiguration, HubMetrics,
    Message, StreamDecoder, FLAG_SESSION_TS_VALID,
};

pub use api::router;
pub use recorder::RecorderStreamMetrics;
pub use session::{transition, Session, SessionEffect, SessionEvent, SessionState, TransitionError};

use recorder::{ActiveRecording, LiveCounters, RouteResult, Routes};

const EVENT_BUFFER: usize = 1024;
const HELLO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct SupervisorOptions {
    /// Hub listener, `host:port`.
    pub listen: String,
    /// HTTP API listener; `None` runs without HTTP.
    pub api: Option<String>,
    /// Default recording root; relative `storage_dir` values resolve here.
    pub storage: PathBuf,
    /// Static files served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub drain_grace: Duration,
    pub control_timeout: Duration,
    pub chunk_limits: ChunkLimits,
}

impl SupervisorOptions {
    pub fn new(storage: impl Into<PathBuf>) -> Self {
        SupervisorOptions {
            listen: "0.0.0.0:7401".into(),
            api: Some("127.0.0.1:8080".into()),
            storage: storage.into(),
            ui_dir: None,
            drain_grace: Duration::from_secs(2),
            control_timeout: Duration::from_secs(5),
            chunk_limits: ChunkLimits::default(),
        }
    }

    /// Ephemeral loopback ports for both listeners.
    pub fn loopback(storage: impl Into<PathBuf>) -> Self {
        SupervisorOptions { listen: "127.0.0.1:0".into(), api: Some("127.0.0.1:0".into()), ..Self::new(storage) }
    }
}

/// Session snapshot served by `GET /api/session`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub state: SessionState,
    pub degraded: bool,
    pub config: Option<SessionConfig>,
    /// Directory name of the recording in progress, or the last one.
    pub recording: Option<String>,
    pub error: Option<String>,
    pub hubs_ready: BTreeMap<String, bool>,
    pub unknown_frames: u64,
    pub discarded_frames: u64,
}

/// Joined hub-side and recorder-side numbers for one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveStream {
    pub stream_id: u32,
    pub hub_id: String,
    pub captured: u64,
    pub published: u64,
    pub dropped: u64,
    pub queue_depth: u64,
    pub fps_1s: f64,
    pub recorded_frames: u64,
    pub recorded_bytes: u64,
    pub mb_per_s: f64,
}

/// Aggregated snapshot served by `GET /api/metrics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub ts_ns: u64,
    pub session_state: SessionState,
    pub hubs: Vec<HubMetrics>,
    pub streams: Vec<LiveStream>,
    pub recorder: Vec<RecorderStreamMetrics>,
    pub unknown_frames: u64,
    pub discarded_frames: u64,
}

/// One line of the `/api/events` stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    HubState {
        ts_ns: u64,
        hub: HubInfo,
    },
    SessionState {
        ts_ns: u64,
        /// Increments by one per transition.
        seq: u64,
        state: SessionState,
        degraded: bool,
        session_name: Option<String>,
        recording: Option<String>,
        error: Option<String>,
    },
    Metrics(MetricsSnapshot),
    Warning {
        ts_ns: u64,
        message: String,
    },
    Heartbeat {
        ts_ns: u64,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("INVALID_CONFIG: {} violation(s)", .0.len())]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error("NOT_FOUND: {0}")]
    NotFound(String),
    #[error("PARTIAL_RECORDING: {0}")]
    Partial(String),
    #[error("INTERNAL: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Invalid(_) => "INVALID_CONFIG",
            ApiError::Transition(t) => t.code(),
            ApiError::NotFound(_) => "NOT_FOUND",
            ApiError::Partial(_) => "PARTIAL_RECORDING",
            ApiError::Internal(_) => "INTERNAL",
        }
    }
}

struct HubLink {
    writer: Mutex<TcpStream>,
    pending: Mutex<HashMap<u64, mpsc::Sender<Message>>>,
}

impl HubLink {
    fn send(&self, msg: &Message) -> std::io::Result<()> {
        let bytes = encode_message(msg).map_err(std::io::Error::other)?;
        self.writer.lock().write_all(&bytes)
    }
}

struct HubEntry {
    address: String,
    state: HubState,
    last_heartbeat_ts: u64,
    clock: Option<OffsetEstimate>,
    metrics: Option<HubMetrics>,
    link: Option<Arc<HubLink>>,
    /// Configuration version the hub last acknowledged.
    configured_version: Option<u64>,
    generation: u64,
}

impl HubEntry {
    fn new(address: String) -> Self {
        HubEntry {
            address,
            state: HubState::Idle,
            last_heartbeat_ts: 0,
            clock: None,
            metrics: None,
            link: None,
            configured_version: None,
            generation: 0,
        }
    }
}

struct Runtime {
    session: Session,
    version: u64,
    recording: Option<ActiveRecording>,
    recording_name: Option<String>,
    event_seq: u64,
}

struct Shared {
    opts: SupervisorOptions,
    hubs: Mutex<BTreeMap<String, HubEntry>>,
    runtime: Mutex<Runtime>,
    state_changed: Condvar,
    /// Leaf copy of the session state for readers that must not block.
    state_cache: Mutex<SessionState>,
    /// Leaf lock: active configuration and its version.
    config: RwLock<Option<(u64, Arc<SessionConfig>)>>,
    routes: RwLock<Option<Arc<Routes>>>,
    live: RwLock<BTreeMap<u32, Arc<LiveCounters>>>,
    roots: Mutex<BTreeSet<PathBuf>>,
    events: broadcast::Sender<Event>,
    unknown_frames: AtomicU64,
    discarded_frames: AtomicU64,
    warned_unknown: Mutex<HashSet<u32>>,
    next_request: AtomicU64,
    conns: Mutex<Vec<TcpStream>>,
    stop: Arc<StopSignal>,
}

fn now_ns() -> u64 {
    monotonic_now_ns()
}

impl Shared {
    fn emit(&self, ev: Event) {
        let _ = self.events.send(ev);
    }

    fn warn(&self, message: String) {
        tracing::warn!("{message}");
        self.emit(Event::Warning { ts_ns: now_ns(), message });
    }

    fn active_config(&self) -> Option<(u64, Arc<SessionConfig>)> {
        self.config.read().clone()
    }

    // ---- registry ----

    fn hub_info(&self, hub_id: &str, e: &HubEntry, cfg: Option<&SessionConfig>) -> HubInfo {
        let adapters = cfg
            .map(|c| {
                c.streams_for_hub(hub_id)
                    .map(|s| AdapterStatus {
                        stream_id: s.descriptor.stream_id,
                        adapter_type: s.adapter.adapter_type,
                        running: e.link.is_some() && e.state == HubState::Streaming,
                    })
                    .collect()
            })
            .unwrap_or_default();
        HubInfo {
            hub_id: hub_id.to_string(),
            address: e.address.clone(),
            connected: e.link.is_some(),
            state: e.state,
            adapters,
            last_heartbeat_ts: e.last_heartbeat_ts,
            clock_offset_ns: e.clock.map(|c| c.offset_ns),
            clock_rtt_ns: e.clock.map(|c| c.rtt_ns),
            clock_dispersion_ns: e.clock.map(|c| c.dispersion_ns),
        }
    }

    fn hubs_view(&self) -> Vec<HubInfo> {
        let cfg = self.active_config();
        let hubs = self.hubs.lock();
        let mut out: Vec<HubInfo> =
            hubs.iter().map(|(id, e)| self.hub_info(id, e, cfg.as_ref().map(|c| c.1.as_ref()))).collect();
        // hubs named by the configuration but never seen
        if let Some((_, c)) = &cfg {
            for h in &c.hubs {
                if !hubs.contains_key(&h.hub_id) {
                    out.push(self.hub_info(&h.hub_id, &HubEntry::new(h.address.clone()), Some(c)));
                }
            }
        }
        out
    }

    fn emit_hub(&self, hub_id: &str) {
        let cfg = self.active_config();
        let info = {
            let hubs = self.hubs.lock();
            match hubs.get(hub_id) {
                Some(e) => self.hub_info(hub_id, e, cfg.as_ref().map(|c| c.1.as_ref())),
                None => return,
            }
        };
        self.emit(Event::HubState { ts_ns: now_ns(), hub: info });
    }

    fn ready_hubs(&self, version: u64) -> BTreeSet<String> {
        self.hubs
            .lock()
            .iter()
            .filter(|(_, e)| e.link.is_some() && e.state == HubState::Ready && e.configured_version == Some(version))
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn request(&self, hub_id: &str, command: ControlCommand) -> Result<HubState, String> {
        let link = self
            .hubs
            .lock()
            .get(hub_id)
            .and_then(|e| e.link.clone())
            .ok_or_else(|| format!("hub {hub_id} not connected"))?;
        let id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        link.pending.lock().insert(id, tx);
        let name = command.name();
        if let Err(e) = link.send(&Message::Control(ControlRequest { id, command })) {
            link.pending.lock().remove(&id);
            return Err(format!("{name} to {hub_id}: {e}"));
        }
        let reply = rx.recv_timeout(self.opts.control_timeout);
        link.pending.lock().remove(&id);
        match reply {
            Ok(Message::ControlAck(a)) => {
                if let Some(e) = self.hubs.lock().get_mut(hub_id) {
                    e.state = a.state;
                }
                Ok(a.state)
            }
            Ok(Message::Error(e)) => Err(format!("{name} to {hub_id}: {:?}: {}", e.code, e.message)),
            Ok(_) => Err(format!("{name} to {hub_id}: unexpected reply")),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(format!("{name} to {hub_id}: no reply")),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(format!("{name} to {hub_id}: connection lost")),
        }
    }

    /// Sends one command to every hub at once and waits for all replies.
    fn command_all(&self, hubs: &[String], command: ControlCommand) {
        let results: Vec<_> = std::thread::scope(|s| {
            let pending: Vec<_> = hubs.iter().map(|h| s.spawn(|| self.request(h, command.clone()))).collect();
            pending.into_iter().map(|t| t.join().unwrap_or_else(|_| Err("control request panicked".into()))).collect()
        });
        for (h, r) in hubs.iter().zip(results) {
            if let Err(e) = r {
                self.warn(e);
            }
            self.emit_hub(h);
        }
    }

    fn configure_hub(&self, hub_id: &str, cfg: &SessionConfig, version: u64) -> Result<(), String> {
        let hub_cfg = HubConfiguration {
            session_name: cfg.session_name.clone(),
            streams: cfg.streams_for_hub(hub_id).cloned().collect(),
            queue_capacity: cfg.queue_capacity,
            metrics_interval_ms: cfg.metrics_interval_ms,
            external_codecs: cfg.external_codecs.clone(),
        };
        self.request(hub_id, ControlCommand::Reset)?;
        self.request(hub_id, ControlCommand::Configure(hub_cfg))?;
        if let Some(e) = self.hubs.lock().get_mut(hub_id) {
            e.configured_version = Some(version);
        }
        self.emit_hub(hub_id);
        Ok(())
    }

    fn is_connected(&self, hub_id: &str) -> bool {
        self.hubs.lock().get(hub_id).is_some_and(|e| e.link.is_some())
    }

    // ---- session ----

    fn session_view(&self, rt: &Runtime) -> SessionView {
        let ready = self.ready_hubs(rt.version);
        let hubs_ready = rt
            .session
            .config
            .as_ref()
            .map(|c| c.active_hubs().into_iter().map(|h| (h.clone(), ready.contains(&h))).collect())
            .unwrap_or_default();
        SessionView {
            state: rt.session.state,
            degraded: rt.session.degraded,
            config: rt.session.config.clone(),
            recording: rt.recording_name.clone(),
            error: rt.session.error.clone(),
            hubs_ready,
            unknown_frames: self.unknown_frames.load(Ordering::Acquire),
            discarded_frames: self.discarded_frames.load(Ordering::Acquire),
        }
    }

    fn dispatch(self: &Arc<Self>, ev: SessionEvent) -> Result<SessionView, ApiError> {
        let mut rt = self.runtime.lock();
        self.dispatch_locked(&mut rt, ev)?;
        Ok(self.session_view(&rt))
    }

    fn dispatch_locked(self: &Arc<Self>, rt: &mut Runtime, ev: SessionEvent) -> Result<(), TransitionError> {
        let is_apply = matches!(ev, SessionEvent::Apply(_));
        let (next, effects) = transition(&rt.session, ev)?;
        rt.session = next;
        if is_apply {
            rt.version += 1;
            let cfg = rt.session.config.clone().map(Arc::new);
            *self.config.write() = cfg.map(|c| (rt.version, c));
            self.unknown_frames.store(0, Ordering::Release);
            self.discarded_frames.store(0, Ordering::Release);
            self.warned_unknown.lock().clear();
        }
        rt.event_seq += 1;
        *self.state_cache.lock() = rt.session.state;
        self.emit(Event::SessionState {
            ts_ns: now_ns(),
            seq: rt.event_seq,
            state: rt.session.state,
            degraded: rt.session.degraded,
            session_name: rt.session.config.as_ref().map(|c| c.session_name.clone()),
            recording: rt.recording_name.clone(),
            error: rt.session.error.clone(),
        });
        self.state_changed.notify_all();
        for effect in effects {
            if let Err(msg) = self.run_effect(rt, effect) {
                // only OpenRecording fails this way; the remaining effects are moot
                self.dispatch_locked(rt, SessionEvent::WriteFailed(msg))?;
                break;
            }
        }
        Ok(())
    }

    fn run_effect(self: &Arc<Self>, rt: &mut Runtime, effect: SessionEffect) -> Result<(), String> {
        match effect {
            SessionEffect::ConfigureHubs(hubs) => {
                let cfg = rt.session.config.clone().expect("configured session has a config");
                for h in &hubs {
                    if !self.is_connected(h) {
                        self.warn(format!("hub {h} not connected; it will be configured when it connects"));
                        continue;
                    }
                    if let Err(e) = self.configure_hub(h, &cfg, rt.version) {
                        self.warn(e);
                    }
                }
                let idle_others: Vec<String> = self
                    .hubs
                    .lock()
                    .iter()
                    .filter(|(id, e)| e.link.is_some() && e.state != HubState::Idle && !hubs.contains(id))
                    .map(|(id, _)| id.clone())
                    .collect();
                for h in idle_others {
                    if let Err(e) = self.request(&h, ControlCommand::Reset) {
                        self.warn(e);
                    }
                    self.emit_hub(&h);
                }
            }
            SessionEffect::OpenRecording => self.open_recording(rt)?,
            SessionEffect::StartHubs(hubs) => self.command_all(&hubs, ControlCommand::Start),
            SessionEffect::StopHubs(hubs) => {
                let live: Vec<String> = hubs.into_iter().filter(|h| self.is_connected(h)).collect();
                self.command_all(&live, ControlCommand::Stop);
            }
            SessionEffect::FinalizeRecording => {
                let me = self.clone();
                std::thread::Builder::new()
                    .name("finalize".into())
                    .spawn(move || me.finalize_recording())
                    .map_err(|e| e.to_string())?;
            }
            SessionEffect::AbortRecording => {
                *self.routes.write() = None;
                if let Some(rec) = rt.recording.take() {
                    std::thread::spawn(move || {
                        let _ = rec.join();
                    });
                }
            }
            SessionEffect::Warn(msg) => self.warn(msg),
        }
        Ok(())
    }

    fn resolve_storage(&self, cfg: &SessionConfig) -> PathBuf {
        let p = Path::new(&cfg.storage_dir);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.opts.storage.join(p)
        }
    }

    fn open_recording(self: &Arc<Self>, rt: &mut Runtime) -> Result<(), String> {
        let cfg = rt.session.config.clone().expect("configured session has a config");
        let registry = CodecRegistry::with_external(&cfg.external_codecs).map_err(|e| e.to_string())?;
        let dir = self.resolve_storage(&cfg);
        std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let mut name = cfg.session_name.clone();
        let mut n = 2;
        while dir.join(&name).exists() {
            name = format!("{}-{n}", cfg.session_name);
            n += 1;
        }
        let header = RecordingHeader {
            format_version: FORMAT_VERSION,
            session_name: cfg.session_name.clone(),
            created_ts: crate::record::unix_now_ns(),
            streams: cfg
                .streams
                .iter()
                .map(|s| StreamSetup {
                    descriptor: s.descriptor.clone(),
                    codec_id: s.codec_id,
                    lossy: registry.is_lossy(s.codec_id),
                    simulated: Some(SimulatedSource {
                        adapter_type: s.adapter.adapter_type,
                        seed: s.adapter.seed,
                        fps: s.effective_fps(),
                    }),
                })
                .collect(),
            external_codecs: cfg.external_codecs.clone(),
        };
        let writer =
            RecordingWriter::create(&dir.join(&name), header, self.opts.chunk_limits).map_err(|e| e.to_string())?;
        let (writers, finisher) = writer.into_parts();
        let weak = Arc::downgrade(self);
        let on_error: Arc<dyn Fn(String) + Send + Sync> = Arc::new(move |msg| {
            if let Some(me) = weak.upgrade() {
                // never dispatch from the writer thread itself: the abort joins it
                std::thread::spawn(move || {
                    let _ = me.dispatch(SessionEvent::WriteFailed(msg));
                });
            }
        });
        let rec = ActiveRecording::start(writers, finisher, on_error).map_err(|e| e.to_string())?;
        *self.live.write() = rec.live.clone();
        *self.routes.write() = Some(rec.routes.clone());
        self.roots.lock().insert(dir);
        tracing::info!("recording to {}", rec.root.display());
        rt.recording_name = Some(name);
        rt.recording = Some(rec);
        Ok(())
    }

    fn finalize_recording(self: Arc<Self>) {
        self.stop.wait_timeout(self.opts.drain_grace);
        *self.routes.write() = None;
        let Some(rec) = self.runtime.lock().recording.take() else {
            return;
        };
        let (summaries, finisher) = rec.join();
        let result = summaries.and_then(|s| {
            let degraded = self.runtime.lock().session.degraded;
            finisher.finalize(s, &self.finalize_info(degraded))
        });
        let ev = match result {
            Ok(_) => SessionEvent::Finalized,
            Err(e) => SessionEvent::WriteFailed(e.to_string()),
        };
        if let Err(e) = self.dispatch(ev) {
            tracing::warn!("finalize: {e}");
        }
    }

    fn finalize_info(&self, degraded: bool) -> FinalizeInfo {
        let hubs = self.hubs.lock();
        let mut drop_counts = BTreeMap::new();
        let mut clock_estimates = BTreeMap::new();
        for (id, e) in hubs.iter() {
            if let Some(m) = &e.metrics {
                for s in &m.streams {
                    drop_counts.insert(s.stream_id, s.dropped);
                }
            }
            if let Some(c) = e.clock {
                clock_estimates.insert(id.clone(), c);
            }
        }
        FinalizeInfo { drop_counts, clock_estimates, degraded }
    }

    fn metrics_snapshot(&self) -> MetricsSnapshot {
        let ts = now_ns();
        let recorder: Vec<RecorderStreamMetrics> =
            self.live.read().iter().map(|(id, c)| c.snapshot(*id, ts)).collect();
        let hubs: Vec<HubMetrics> = self.hubs.lock().values().filter_map(|e| e.metrics.clone()).collect();
        let mut streams = Vec::new();
        for m in &hubs {
            for s in &m.streams {
                let rec = recorder.iter().find(|r| r.stream_id == s.stream_id);
                streams.push(LiveStream {
                    stream_id: s.stream_id,
                    hub_id: m.hub_id.clone(),
                    captured: s.captured,
                    published: s.published,
                    dropped: s.dropped,
                    queue_depth: s.queue_depth,
                    fps_1s: s.fps_1s,
                    recorded_frames: rec.map_or(0, |r| r.frames),
                    recorded_bytes: rec.map_or(0, |r| r.bytes),
                    mb_per_s: rec.map_or(0.0, |r| r.mb_per_s),
                });
            }
        }
        streams.sort_by_key(|s| s.stream_id);
        MetricsSnapshot {
            ts_ns: ts,
            session_state: *self.state_cache.lock(),
            hubs,
            streams,
            recorder,
            unknown_frames: self.unknown_frames.load(Ordering::Acquire),
            discarded_frames: self.discarded_frames.load(Ordering::Acquire),
        }
    }

    // ---- ingest ----

    fn ingest(&self, hub_id: &str, fm: FrameMessage) {
        let routes = self.routes.read().clone();
        let Some(routes) = routes else {
            self.discarded_frames.fetch_add(1, Ordering::AcqRel);
            return;
        };
        let mut frame = fm.frame;
        if fm.flags & FLAG_SESSION_TS_VALID == 0 {
            let est = self.hubs.lock().get(hub_id).and_then(|e| e.clock);
            frame.session_ts_ns = match est {
                Some(est) => to_session_time(frame.capture_ts_ns, &est),
                None => now_ns(),
            };
        }
        let stream_id = frame.stream_id;
        match routes.route(frame, now_ns()) {
            RouteResult::Written => {}
            RouteResult::UnknownStream => {
                self.unknown_frames.fetch_add(1, Ordering::AcqRel);
                if self.warned_unknown.lock().insert(stream_id) {
                    self.warn(format!("frame for undeclared stream {stream_id} from hub {hub_id} discarded"));
                }
            }
            RouteResult::WriterGone => {
                self.discarded_frames.fetch_add(1, Ordering::AcqRel);
            }
        }
    }

    // ---- connections ----

    fn handle_connection(self: &Arc<Self>, stream: TcpStream) -> std::io::Result<()> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        if let Ok(c) = stream.try_clone() {
            self.conns.lock().push(c);
        }
        let mut reader = stream.try_clone()?;
        let mut dec = StreamDecoder::default();
        reader.set_read_timeout(Some(HELLO_TIMEOUT))?;
        let hello = match dec.read_from(&mut reader)? {
            Some(Message::Hello(h)) => h,
            Some(other) => {
                return Err(std::io::Error::other(format!("expected HELLO, got {:?}", other.message_type())));
            }
            None => return Ok(()),
        };
        reader.set_read_timeout(None)?;
        let hub_id = hello.hub_id.clone();
        match hello.role {
            ConnectionRole::Data => {
                tracing::debug!(hub = %hub_id, "data connection from {peer}");
                while let Some(msg) = dec.read_from(&mut reader)? {
                    match msg {
                        Message::Frame(f) => self.ingest(&hub_id, f),
                        Message::Bye => break,
                        other => tracing::debug!("data connection: ignoring {:?}", other.message_type()),
                    }
                }
                Ok(())
            }
            ConnectionRole::Control => self.control_connection(hub_id, peer, stream, reader, dec),
        }
    }

    fn control_connection(
        self: &Arc<Self>,
        hub_id: String,
        peer: String,
        stream: TcpStream,
        mut reader: TcpStream,
        mut dec: StreamDecoder,
    ) -> std::io::Result<()> {
        let link = Arc::new(HubLink { writer: Mutex::new(stream), pending: Mutex::new(HashMap::new()) });
        let generation = {
            let mut hubs = self.hubs.lock();
            let e = hubs.entry(hub_id.clone()).or_insert_with(|| HubEntry::new(peer.clone()));
            if let Some(old) = e.link.take() {
                let _ = old.writer.lock().shutdown(Shutdown::Both);
            }
            e.address = peer.clone();
            e.link = Some(link.clone());
            e.last_heartbeat_ts = now_ns();
            e.generation += 1;
            e.generation
        };
        tracing::info!(hub = %hub_id, "hub connected from {peer}");
        self.emit_hub(&hub_id);
        {
            let me = self.clone();
            let hub_id = hub_id.clone();
            std::thread::Builder::new().name(format!("resync-{hub_id}")).spawn(move || me.resync_hub(&hub_id))?;
        }

        let result = loop {
            let msg = match dec.read_from(&mut reader) {
                Ok(Some(m)) => m,
                Ok(None) => break Ok(()),
                Err(e) => break Err(e),
            };
            let t2 = now_ns();
            if let Some(e) = self.hubs.lock().get_mut(&hub_id) {
                e.last_heartbeat_ts = t2;
            }
            match msg {
                Message::TimesyncReq { t1 } => {
                    let mut w = link.writer.lock();
                    let t3 = now_ns();
                    let bytes = encode_message(&Message::TimesyncResp { t1, t2, t3 }).map_err(std::io::Error::other)?;
                    if let Err(e) = w.write_all(&bytes) {
                        break Err(e);
                    }
                }
                Message::Metrics(m) => {
                    let changed = {
                        let mut hubs = self.hubs.lock();
                        let e = hubs.get_mut(&hub_id).expect("registered");
                        let changed = e.state != m.state;
                        e.state = m.state;
                        if m.clock.is_some() {
                            e.clock = m.clock;
                        }
                        e.metrics = Some(m);
                        changed
                    };
                    if changed {
                        self.emit_hub(&hub_id);
                    }
                }
                Message::ControlAck(a) => {
                    if let Some(tx) = link.pending.lock().remove(&a.id) {
                        let _ = tx.send(Message::ControlAck(a));
                    }
                }
                Message::Error(e) => match e.id.and_then(|id| link.pending.lock().remove(&id)) {
                    Some(tx) => {
                        let _ = tx.send(Message::Error(e));
                    }
                    None => self.warn(format!("hub {hub_id}: {:?}: {}", e.code, e.message)),
                },
                Message::Frame(f) => self.ingest(&hub_id, f),
                Message::Ping(n) => {
                    if let Err(e) = link.send(&Message::Pong(n)) {
                        break Err(e);
                    }
                }
                Message::Bye => break Ok(()),
                other => tracing::debug!(hub = %hub_id, "ignoring {:?}", other.message_type()),
            }
        };

        let current = {
            let mut hubs = self.hubs.lock();
            match hubs.get_mut(&hub_id) {
                Some(e) if e.generation == generation => {
                    e.link = None;
                    true
                }
                _ => false,
            }
        };
        // wake any request waiting on this link
        link.pending.lock().clear();
        if current {
            tracing::info!(hub = %hub_id, "hub disconnected");
            self.emit_hub(&hub_id);
            let mut rt = self.runtime.lock();
            let involved = rt.session.config.as_ref().is_some_and(|c| c.active_hubs().contains(&hub_id));
            if involved && rt.session.state == SessionState::Recording {
                let _ = self.dispatch_locked(&mut rt, SessionEvent::HubLost(hub_id.clone()));
            }
        }
        result
    }

    /// Brings a (re)connected hub in line with the session.
    fn resync_hub(self: &Arc<Self>, hub_id: &str) {
        let mut rt = self.runtime.lock();
        let Some(cfg) = rt.session.config.clone() else {
            return;
        };
        let state = rt.session.state;
        if !matches!(state, SessionState::Configured | SessionState::Recording) {
            return;
        }
        if !cfg.active_hubs().iter().any(|h| h == hub_id) {
            return;
        }
        let hub_state = match self.request(hub_id, ControlCommand::Status) {
            Ok(s) => s,
            Err(e) => return self.warn(e),
        };
        let version = rt.version;
        let current = self.hubs.lock().get(hub_id).is_some_and(|e| e.configured_version == Some(version));
        let result = match (state, hub_state) {
            (_, HubState::Idle) => self.configure_hub(hub_id, &cfg, version),
            (_, _) if !current => self.configure_hub(hub_id, &cfg, version),
            (SessionState::Configured, HubState::Streaming) => self.request(hub_id, ControlCommand::Stop).map(drop),
            _ => Ok(()),
        };
        if let Err(e) = result {
            return self.warn(e);
        }
        if state == SessionState::Recording {
            let streaming = self.hubs.lock().get(hub_id).is_some_and(|e| e.state == HubState::Streaming);
            if !streaming {
                if let Err(e) = self.request(hub_id, ControlCommand::Start) {
                    return self.warn(e);
                }
            }
            let _ = self.dispatch_locked(&mut rt, SessionEvent::HubRecovered(hub_id.to_string()));
        }
        drop(rt);
        self.emit_hub(hub_id);
    }

    // ---- recordings ----

    fn recordings(&self) -> Vec<RecordingSummary> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for root in self.roots.lock().iter() {
            for r in list_recordings(root) {
                if seen.insert(r.name.clone()) {
                    out.push(r);
                }
            }
        }
        out.sort_by(|a, b| a.created_ts.cmp(&b.created_ts).then_with(|| a.name.cmp(&b.name)));
        out
    }

    fn recording_manifest(&self, name: &str) -> Result<RecordingManifest, ApiError> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(ApiError::NotFound(name.to_string()));
        }
        let roots: Vec<PathBuf> = self.roots.lock().iter().cloned().collect();
        for root in roots {
            match Recording::open(&root.join(name)) {
                Ok(r) => return Ok(r.manifest().clone()),
                Err(RecordError::NotFound(_)) => continue,
                Err(RecordError::Partial(_)) => return Err(ApiError::Partial(name.to_string())),
                Err(e) => return Err(ApiError::Internal(e.to_string())),
            }
        }
        Err(ApiError::NotFound(name.to_string()))
    }
}

/// A running supervisor. Dropping it shuts everything down.
pub struct Supervisor {
    shared: Arc<Shared>,
    hub_addr: SocketAddr,
    api_addr: Option<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
    http: Option<(tokio::runtime::Runtime, tokio::sync::oneshot::Sender<()>)>,
}

impl Supervisor {
    pub fn start(opts: SupervisorOptions) -> std::io::Result<Supervisor> {
        std::fs::create_dir_all(&opts.storage)?;
        let listener = TcpListener::bind(&opts.listen)?;
        let hub_addr = listener.local_addr()?;
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let shared = Arc::new(Shared {
            roots: Mutex::new(BTreeSet::from([opts.storage.clone()])),
            opts,
            hubs: Mutex::new(BTreeMap::new()),
            runtime: Mutex::new(Runtime {
                session: Session::default(),
                version: 0,
                recording: None,
                recording_name: None,
                event_seq: 0,
            }),
            state_changed: Condvar::new(),
            state_cache: Mutex::new(SessionState::Idle),
            config: RwLock::new(None),
            routes: RwLock::new(None),
            live: RwLock::new(BTreeMap::new()),
            events,
            unknown_frames: AtomicU64::new(0),
            discarded_frames: AtomicU64::new(0),
            warned_unknown: Mutex::new(HashSet::new()),
            next_request: AtomicU64::new(1),
            conns: Mutex::new(Vec::new()),
            stop: StopSignal::new(),
        });

        let mut threads = Vec::new();
        {
            let shared = shared.clone();
            threads.push(std::thread::Builder::new().name("hub-listener".into()).spawn(move || {
                for conn in listener.incoming() {
                    if shared.stop.is_stopped() {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let s = shared.clone();
                    let _ = std::thread::Builder::new().name("hub-conn".into()).spawn(move || {
                        if let Err(e) = s.handle_connection(conn) {
                            tracing::debug!("hub connection: {e}");
                        }
                    });
                }
            })?);
        }
        {
            let shared = shared.clone();
            threads.push(std::thread::Builder::new().name("metrics".into()).spawn(move || loop {
                let interval = shared.active_config().map_or(500, |c| c.1.metrics_interval_ms.max(50));
                if shared.stop.wait_timeout(Duration::from_millis(interval)) {
                    break;
                }
                if shared.events.receiver_count() > 0 {
                    shared.emit(Event::Metrics(shared.metrics_snapshot()));
                }
            })?);
        }

        let mut sup = Supervisor { shared: shared.clone(), hub_addr, api_addr: None, threads, http: None };
        if let Some(api) = shared.opts.api.clone() {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .thread_name("api")
                .enable_all()
                .build()?;
            let listener = rt.block_on(tokio::net::TcpListener::bind(&api))?;
            sup.api_addr = Some(listener.local_addr()?);
            let (tx, rx) = tokio::sync::oneshot::channel::<()>();
            let app = api::router(SupervisorApi { shared });
            rt.spawn(async move {
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = serve.await {
                    tracing::error!("api server: {e}");
                }
            });
            sup.http = Some((rt, tx));
        }
        Ok(sup)
    }

    pub fn hub_addr(&self) -> SocketAddr {
        self.hub_addr
    }

    pub fn api_addr(&self) -> Option<SocketAddr> {
        self.api_addr
    }

    pub fn api(&self) -> SupervisorApi {
        SupervisorApi { shared: self.shared.clone() }
    }

    /// Blocks until SIGINT or SIGTERM, then shuts down.
    pub fn run_until_interrupted(mut self) {
        crate::wait_for_interrupt();
        tracing::info!("shutting down");
        self.halt();
    }

    pub fn shutdown(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if self.shared.stop.is_stopped() {
            return;
        }
        let api = self.api();
        if api.session().state == SessionState::Recording {
            let _ = api.stop();
            api.wait_for_state(
                &[SessionState::Complete, SessionState::Error],
                self.shared.opts.drain_grace + Duration::from_secs(30),
            );
        }
        self.shared.stop.stop(0);
        // wake the accept loop
        let _ = TcpStream::connect_timeout(&wake_addr(self.hub_addr), Duration::from_secs(1));
        {
            let hubs = self.shared.hubs.lock();
            for e in hubs.values() {
                if let Some(l) = &e.link {
                    let _ = l.send(&Message::Bye);
                }
            }
        }
        for c in self.shared.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some((rt, tx)) = self.http.take() {
            let _ = tx.send(());
            rt.shutdown_timeout(Duration::from_secs(2));
        }
    }
}

impl Drop for Supervisor {
    fn drop(&mut self) {
        self.halt();
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    let mut a = addr;
    if a.ip().is_unspecified() {
        a.set_ip(match a {
            SocketAddr::V4(_) => std::net::Ipv4Addr::LOCALHOST.into(),
            SocketAddr::V6(_) => std::net::Ipv6Addr::LOCALHOST.into(),
        });
    }
    a
}

/// Cloneable handle to a running supervisor's operations. The HTTP API is a
/// thin layer over these; all of them may block.
#[derive(Clone)]
pub struct SupervisorApi {
    shared: Arc<Shared>,
}

impl SupervisorApi {
    pub fn hubs(&self) -> Vec<HubInfo> {
        self.shared.hubs_view()
    }

    pub fn session(&self) -> SessionView {
        let rt = self.shared.runtime.lock();
        self.shared.session_view(&rt)
    }

    pub fn apply(&self, cfg: SessionConfig) -> Result<SessionView, ApiError> {
        validate_session_config(&cfg).map_err(ApiError::Invalid)?;
        self.shared.dispatch(SessionEvent::Apply(cfg))
    }

    pub fn start(&self) -> Result<SessionView, ApiError> {
        let mut rt = self.shared.runtime.lock();
        let ready_hubs = self.shared.ready_hubs(rt.version);
        self.shared.dispatch_locked(&mut rt, SessionEvent::Start { ready_hubs })?;
        Ok(self.shared.session_view(&rt))
    }

    pub fn stop(&self) -> Result<SessionView, ApiError> {
        self.shared.dispatch(SessionEvent::Stop)
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.shared.metrics_snapshot()
    }

    pub fn recordings(&self) -> Vec<RecordingSummary> {
        self.shared.recordings()
    }

    pub fn recording(&self, name: &str) -> Result<RecordingManifest, ApiError> {
        self.shared.recording_manifest(name)
    }

    /// Directory of the recording in progress or the last one written.
    pub fn recording_path(&self) -> Option<PathBuf> {
        let rt = self.shared.runtime.lock();
        let name = rt.recording_name.clone()?;
        let cfg = rt.session.config.as_ref()?;
        Some(self.shared.resolve_storage(cfg).join(name))
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.shared.events.subscribe()
    }

    /// Events describing the current state, sent first on every new
    /// event-stream connection.
    pub fn snapshot_events(&self) -> Vec<Event> {
        let mut out = Vec::new();
        {
            let rt = self.shared.runtime.lock();
            out.push(Event::SessionState {
                ts_ns: now_ns(),
                seq: rt.event_seq,
                state: rt.session.state,
                degraded: rt.session.degraded,
                session_name: rt.session.config.as_ref().map(|c| c.session_name.clone()),
                recording: rt.recording_name.clone(),
                error: rt.session.error.clone(),
            });
        }
        for hub in self.hubs() {
            out.push(Event::HubState { ts_ns: now_ns(), hub });
        }
        out.push(Event::Metrics(self.metrics()));
        out
    }

    pub fn wait_for_state(&self, states: &[SessionState], timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut rt = self.shared.runtime.lock();
        while !states.contains(&rt.session.state) {
            if self.shared.state_changed.wait_until(&mut rt, deadline).timed_out() {
                return states.contains(&rt.session.state);
            }
        }
        true
    }

    /// Polls until every named hub is connected.
    pub fn wait_for_hubs(&self, hub_ids: &[&str], timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let ok = {
                let hubs = self.shared.hubs.lock();
                hub_ids.iter().all(|h| hubs.get(*h).is_some_and(|e| e.link.is_some()))
            };
            if ok {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Polls until every hub of the active configuration is READY with it.
    pub fn wait_for_ready(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.session().hubs_ready.values().all(|r| *r) && self.shared.active_config().is_some() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub(crate) fn ui_dir(&self) -> Option<PathBuf> {
        self.shared.opts.ui_dir.clone()
    }
}
