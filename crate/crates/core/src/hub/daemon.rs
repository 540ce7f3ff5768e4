use std::io::Write;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::{HubCore, Transport};
use crate::clock::{Clock, MonotonicClock, StopSignal};
use crate::clocksync::{SyncSample, DEFAULT_WINDOW, RESYNC_PERIOD_NS};
use crate::types::{AdapterType, DEFAULT_METRICS_INTERVAL_MS};
use crate::wire::{
    encode_into, encode_message, ConnectionRole, ControlCommand, ControlRequest, HubConfiguration, Hello, Message,
    StreamDecoder,
};

#[derive(Debug, Clone)]
pub struct HubOptions {
    pub hub_id: String,
    /// `host:port` of the supervisor.
    pub supervisor: String,
    /// Added to the hub's monotonic clock (emulates an unsynchronised host).
    pub clock_offset_ns: i64,
    /// Ship FRAME traffic over a second connection so control and clock
    /// sync never queue behind large frames.
    pub separate_data_connection: bool,
    /// Applied locally before the first connection.
    pub initial_config: Option<HubConfiguration>,
    pub backoff_min: Duration,
    pub backoff_max: Duration,
    pub resync_period: Duration,
}

impl HubOptions {
    pub fn new(hub_id: &str, supervisor: &str) -> Self {
        HubOptions {
            hub_id: hub_id.to_string(),
            supervisor: supervisor.to_string(),
            clock_offset_ns: 0,
            separate_data_connection: true,
            initial_config: None,
            backoff_min: Duration::from_millis(500),
            backoff_max: Duration::from_secs(8),
            resync_period: Duration::from_nanos(RESYNC_PERIOD_NS),
        }
    }
}

#[derive(Default)]
struct TcpTransport {
    control: Mutex<Option<TcpStream>>,
    data: Mutex<Option<TcpStream>>,
    connected: AtomicBool,
}

impl TcpTransport {
    fn send(&self, msg: &Message) -> std::io::Result<()> {
        let bytes = encode_message(msg).map_err(std::io::Error::other)?;
        self.write_control(&bytes)
    }

    fn write_control(&self, bytes: &[u8]) -> std::io::Result<()> {
        let mut g = self.control.lock();
        let s = g.as_mut().ok_or_else(|| std::io::Error::from(std::io::ErrorKind::NotConnected))?;
        let r = s.write_all(bytes);
        if r.is_err() {
            drop(g);
            self.disconnect();
        }
        r
    }

    /// Stamps `t1` while holding the connection so nothing queues in between.
    fn send_timesync(&self, clock: &dyn Clock) -> std::io::Result<()> {
        let mut g = self.control.lock();
        let s = g.as_mut().ok_or_else(|| std::io::Error::from(std::io::ErrorKind::NotConnected))?;
        let mut buf = Vec::with_capacity(32);
        encode_into(&Message::TimesyncReq { t1: clock.now_ns() }, &mut buf).map_err(std::io::Error::other)?;
        s.write_all(&buf)
    }

    fn disconnect(&self) {
        self.connected.store(false, Ordering::Release);
        for slot in [&self.control, &self.data] {
            if let Some(s) = slot.lock().as_ref() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }
}

impl Transport for TcpTransport {
    fn send_frame(&self, bytes: &[u8]) -> std::io::Result<()> {
        {
            let mut g = self.data.lock();
            if let Some(s) = g.as_mut() {
                let r = s.write_all(bytes);
                if r.is_err() {
                    drop(g);
                    self.disconnect();
                }
                return r;
            }
        }
        self.write_control(bytes)
    }

    fn is_connected(&self) -> bool {
        self.connected.load(Ordering::Acquire)
    }
}

/// A running hub: the runtime plus its supervisor connection.
pub struct HubDaemon {
    core: Arc<HubCore>,
    transport: Arc<TcpTransport>,
    stop: Arc<StopSignal>,
    thread: Option<JoinHandle<()>>,
}

impl HubDaemon {
    pub fn core(&self) -> &Arc<HubCore> {
        &self.core
    }

    pub fn is_connected(&self) -> bool {
        self.transport.is_connected()
    }

    /// Says BYE, closes the connection and stops all adapters.
    pub fn shutdown(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.stop(0);
        let _ = self.transport.send(&Message::Bye);
        self.transport.disconnect();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.core.shutdown();
    }
}

impl Drop for HubDaemon {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Starts a hub that dials the supervisor and keeps reconnecting with
/// exponential backoff until shut down.
pub fn run_hub(opts: HubOptions) -> Result<HubDaemon, String> {
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new(opts.clock_offset_ns));
    let transport = Arc::new(TcpTransport::default());
    let core = HubCore::new(&opts.hub_id, clock, transport.clone());
    if let Some(cfg) = opts.initial_config.clone() {
        let reply = core.handle(&ControlRequest { id: 0, command: ControlCommand::Configure(cfg) });
        if let Message::Error(e) = reply {
            return Err(format!("{:?}: {}", e.code, e.message));
        }
    }
    let stop = StopSignal::new();
    let thread = {
        let core = core.clone();
        let transport = transport.clone();
        let stop = stop.clone();
        std::thread::Builder::new()
            .name("hub-conn".into())
            .spawn(move || connection_loop(&opts, &core, &transport, &stop))
            .map_err(|e| e.to_string())?
    };
    Ok(HubDaemon { core, transport, stop, thread: Some(thread) })
}

fn connect(addr: &str) -> std::io::Result<TcpStream> {
    let mut last = std::io::Error::from(std::io::ErrorKind::AddrNotAvailable);
    for a in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&a, Duration::from_secs(2)) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn connection_loop(opts: &HubOptions, core: &Arc<HubCore>, transport: &Arc<TcpTransport>, stop: &StopSignal) {
    let mut backoff = opts.backoff_min;
    while !stop.is_stopped() {
        match connect(&opts.supervisor) {
            Ok(s) => {
                backoff = opts.backoff_min;
                tracing::info!(hub = %opts.hub_id, "connected to {}", opts.supervisor);
                if let Err(e) = run_connection(opts, core, transport, stop, s) {
                    tracing::warn!(hub = %opts.hub_id, "connection ended: {e}");
                }
                transport.disconnect();
            }
            Err(e) => {
                tracing::debug!(hub = %opts.hub_id, "connect failed: {e}; retry in {backoff:?}");
                if stop.wait_timeout(backoff) {
                    break;
                }
                backoff = (backoff * 2).min(opts.backoff_max);
            }
        }
    }
}

fn hello(opts: &HubOptions, role: ConnectionRole) -> Message {
    Message::Hello(Hello {
        hub_id: opts.hub_id.clone(),
        role,
        capabilities: vec![AdapterType::SimUs, AdapterType::SimPose, AdapterType::SimRgbd],
        separate_data_connection: opts.separate_data_connection,
    })
}

fn run_connection(
    opts: &HubOptions,
    core: &Arc<HubCore>,
    transport: &Arc<TcpTransport>,
    stop: &StopSignal,
    ctrl: TcpStream,
) -> std::io::Result<()> {
    let mut reader = ctrl.try_clone()?;
    *transport.control.lock() = Some(ctrl);
    transport.send(&hello(opts, ConnectionRole::Control))?;
    if opts.separate_data_connection {
        let mut data = connect(&opts.supervisor)?;
        data.write_all(&encode_message(&hello(opts, ConnectionRole::Data)).map_err(std::io::Error::other)?)?;
        *transport.data.lock() = Some(data);
    } else {
        *transport.data.lock() = None;
    }
    transport.connected.store(true, Ordering::Release);

    let alive = StopSignal::new();
    let timer = {
        let core = core.clone();
        let transport = transport.clone();
        let alive = alive.clone();
        let resync = opts.resync_period;
        std::thread::Builder::new().name("hub-timer".into()).spawn(move || timer_loop(&core, &transport, &alive, resync))?
    };

    let mut dec = StreamDecoder::default();
    let result = loop {
        if stop.is_stopped() {
            break Ok(());
        }
        let msg = match dec.read_from(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        match msg {
            Message::TimesyncResp { t1, t2, t3 } => {
                let t4 = core.clock().now_ns();
                core.add_sync_sample(SyncSample { t1, t2, t3, t4 });
            }
            Message::Control(req) => {
                let reply = core.handle(&req);
                transport.send(&reply)?;
            }
            Message::Ping(n) => transport.send(&Message::Pong(n))?,
            Message::Subscribe(s) => core.set_subscription(&s.stream_ids, true),
            Message::Unsubscribe(s) => core.set_subscription(&s.stream_ids, false),
            Message::Bye => break Ok(()),
            other => tracing::debug!("ignoring {:?}", other.message_type()),
        }
    };
    alive.stop(0);
    transport.disconnect();
    let _ = timer.join();
    result
}

/// Clock-sync burst on connect, periodic resync, periodic METRICS.
fn timer_loop(core: &HubCore, transport: &TcpTransport, alive: &StopSignal, resync: Duration) {
    for _ in 0..DEFAULT_WINDOW {
        if transport.send_timesync(core.clock().as_ref()).is_err() || alive.wait_timeout(Duration::from_millis(10)) {
            return;
        }
    }
    let mut next_sync = std::time::Instant::now() + resync;
    let mut next_metrics = std::time::Instant::now();
    loop {
        let now = std::time::Instant::now();
        if now >= next_sync {
            if transport.send_timesync(core.clock().as_ref()).is_err() {
                return;
            }
            next_sync = now + resync;
        }
        if now >= next_metrics {
            if transport.send(&Message::Metrics(core.metrics())).is_err() {
                return;
            }
            next_metrics = now + Duration::from_millis(core.metrics_interval_ms());
        }
        let wake = next_sync.min(next_metrics);
        if alive.wait_timeout(wake.saturating_duration_since(std::time::Instant::now())) {
            return;
        }
    }
}

impl HubCore {
    pub fn metrics_interval_ms(&self) -> u64 {
        self.control.lock().config.as_ref().map_or(DEFAULT_METRICS_INTERVAL_MS, |c| c.metrics_interval_ms)
    }
}
