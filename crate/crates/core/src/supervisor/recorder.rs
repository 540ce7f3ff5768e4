//! Ingest side of the supervisor: routes FRAME messages to one writer thread
//! per stream.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::record::{RecordError, RecordingFinisher, StreamSummary, StreamWriter};
use crate::types::Frame;

const WRITER_QUEUE: usize = 16;
const RATE_WINDOW_NS: u64 = 1_000_000_000;

/// Recorder-side live numbers for one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecorderStreamMetrics {
    pub stream_id: u32,
    pub frames: u64,
    pub bytes: u64,
    pub fps_1s: f64,
    pub mb_per_s: f64,
}

#[derive(Default)]
pub(crate) struct LiveCounters {
    frames: AtomicU64,
    bytes: AtomicU64,
    recent: Mutex<VecDeque<(u64, u64)>>,
}

impl LiveCounters {
    fn note(&self, now_ns: u64, bytes: u64) {
        self.frames.fetch_add(1, Ordering::AcqRel);
        self.bytes.fetch_add(bytes, Ordering::AcqRel);
        let mut r = self.recent.lock();
        r.push_back((now_ns, bytes));
        while r.front().is_some_and(|&(t, _)| t + RATE_WINDOW_NS < now_ns) {
            r.pop_front();
        }
    }

    pub(crate) fn snapshot(&self, stream_id: u32, now_ns: u64) -> RecorderStreamMetrics {
        let r = self.recent.lock();
        let start = now_ns.saturating_sub(RATE_WINDOW_NS);
        let (n, b) = r.iter().filter(|&&(t, _)| t > start && t <= now_ns).fold((0u64, 0u64), |(n, b), &(_, x)| (n + 1, b + x));
        RecorderStreamMetrics {
            stream_id,
            frames: self.frames.load(Ordering::Acquire),
            bytes: self.bytes.load(Ordering::Acquire),
            fps_1s: n as f64,
            mb_per_s: b as f64 / 1e6,
        }
    }
}

pub(crate) struct StreamRoute {
    tx: SyncSender<Frame>,
    pub(crate) live: Arc<LiveCounters>,
}

/// Frame routing table for the recording in progress.
pub(crate) struct Routes {
    pub(crate) streams: HashMap<u32, StreamRoute>,
}

pub(crate) enum RouteResult {
    Written,
    UnknownStream,
    WriterGone,
}

impl Routes {
    /// Hands a frame to its writer, blocking while the writer is behind.
    pub(crate) fn route(&self, frame: Frame, now_ns: u64) -> RouteResult {
        let Some(r) = self.streams.get(&frame.stream_id) else {
            return RouteResult::UnknownStream;
        };
        let bytes = frame.payload.len() as u64;
        match r.tx.send(frame) {
            Ok(()) => {
                r.live.note(now_ns, bytes);
                RouteResult::Written
            }
            Err(_) => RouteResult::WriterGone,
        }
    }
}

/// A recording being written: routes plus writer threads.
pub(crate) struct ActiveRecording {
    pub(crate) root: PathBuf,
    pub(crate) routes: Arc<Routes>,
    pub(crate) live: BTreeMap<u32, Arc<LiveCounters>>,
    writers: Vec<JoinHandle<Result<StreamSummary, RecordError>>>,
    pub(crate) finisher: RecordingFinisher,
}

impl ActiveRecording {
    /// Spawns one writer thread per stream. `on_error` runs (once per
    /// failing writer) when an append fails.
    pub(crate) fn start(
        writers: BTreeMap<u32, StreamWriter>,
        finisher: RecordingFinisher,
        on_error: Arc<dyn Fn(String) + Send + Sync>,
    ) -> std::io::Result<ActiveRecording> {
        let mut streams = HashMap::new();
        let mut live = BTreeMap::new();
        let mut handles = Vec::new();
        for (id, w) in writers {
            let (tx, rx) = sync_channel(WRITER_QUEUE);
            let counters = Arc::new(LiveCounters::default());
            live.insert(id, counters.clone());
            streams.insert(id, StreamRoute { tx, live: counters });
            let on_error = on_error.clone();
            handles.push(
                std::thread::Builder::new()
                    .name(format!("writer-{id}"))
                    .spawn(move || writer_loop(w, rx, on_error.as_ref()))?,
            );
        }
        Ok(ActiveRecording {
            root: finisher.root().to_path_buf(),
            routes: Arc::new(Routes { streams }),
            live,
            writers: handles,
            finisher,
        })
    }

    /// Waits for every writer to drain and close. Callers must have dropped
    /// their references to the routes first.
    pub(crate) fn join(self) -> (Result<Vec<StreamSummary>, RecordError>, RecordingFinisher) {
        let ActiveRecording { routes, writers, finisher, .. } = self;
        drop(routes);
        let mut out = Vec::new();
        let mut err = None;
        for h in writers {
            match h.join() {
                Ok(Ok(s)) => out.push(s),
                Ok(Err(e)) => err = err.or(Some(e)),
                Err(_) => err = err.or(Some(RecordError::Corrupt("writer thread panicked".into()))),
            }
        }
        (err.map_or(Ok(out), Err), finisher)
    }
}

fn writer_loop(
    mut w: StreamWriter,
    rx: Receiver<Frame>,
    on_error: &(dyn Fn(String) + Send + Sync),
) -> Result<StreamSummary, RecordError> {
    let mut failed: Option<RecordError> = None;
    loop {
        match rx.recv_timeout(Duration::from_millis(250)) {
            Ok(frame) => {
                if failed.is_some() {
                    continue;
                }
                if let Err(e) = w.append(&frame) {
                    match e {
                        // out-of-order frames are skipped, not fatal
                        RecordError::SeqOrder { .. } => tracing::warn!("{e}"),
                        e => {
                            on_error(e.to_string());
                            failed = Some(e);
                        }
                    }
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                if failed.is_none() {
                    if let Err(e) = w.flush_if_due() {
                        on_error(e.to_string());
                        failed = Some(e);
                    }
                }
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    match failed {
        Some(e) => Err(e),
        None => w.finish(),
    }
}
