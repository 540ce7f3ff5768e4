//! Time sources. Production code runs on the host monotonic clock; tests
//! drive a [`SimClock`] by hand so frame counts are exact.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

pub trait Clock: Send + Sync {
    fn now_ns(&self) -> u64;

    /// Blocks until `now_ns() >= deadline_ns` or `stop` is signalled.
    /// Returns `false` when interrupted by the stop signal.
    fn sleep_until(&self, deadline_ns: u64, stop: &StopSignal) -> bool;

    /// Whether time passes on its own. Adapters on a real-time clock skip
    /// ticks they are too late for; on a manual clock every tick is emitted.
    fn is_realtime(&self) -> bool {
        true
    }
}

/// Raw `CLOCK_MONOTONIC` in nanoseconds, shifted by a fixed offset (used to
/// emulate hubs whose clocks disagree with the supervisor's).
#[derive(Debug, Clone, Copy, Default)]
pub struct MonotonicClock {
    pub offset_ns: i64,
}

impl MonotonicClock {
    pub fn new(offset_ns: i64) -> Self {
        MonotonicClock { offset_ns }
    }
}

pub fn monotonic_now_ns() -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    unsafe {
        libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts);
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        (monotonic_now_ns() as i128 + self.offset_ns as i128).max(0) as u64
    }

    fn sleep_until(&self, deadline_ns: u64, stop: &StopSignal) -> bool {
        loop {
            let now = self.now_ns();
            if now >= deadline_ns {
                return true;
            }
            if stop.wait_timeout(Duration::from_nanos(deadline_ns - now)) {
                return false;
            }
        }
    }
}

/// Manually advanced clock.
#[derive(Debug, Default)]
pub struct SimClock {
    now: Mutex<u64>,
    cv: Condvar,
}

impl SimClock {
    pub fn new(start_ns: u64) -> Arc<Self> {
        Arc::new(SimClock { now: Mutex::new(start_ns), cv: Condvar::new() })
    }

    pub fn set(&self, ns: u64) {
        let mut now = self.now.lock();
        *now = (*now).max(ns);
        self.cv.notify_all();
    }

    pub fn advance(&self, ns: u64) {
        let mut now = self.now.lock();
        *now += ns;
        self.cv.notify_all();
    }
}

impl Clock for SimClock {
    fn now_ns(&self) -> u64 {
        *self.now.lock()
    }

    fn sleep_until(&self, deadline_ns: u64, stop: &StopSignal) -> bool {
        let mut now = self.now.lock();
        loop {
            if *now >= deadline_ns {
                return true;
            }
            if stop.is_stopped() {
                return false;
            }
            self.cv.wait_for(&mut now, Duration::from_millis(2));
        }
    }

    fn is_realtime(&self) -> bool {
        false
    }
}

/// One-shot stop request that records the clock time it was raised at.
#[derive(Debug, Default)]
pub struct StopSignal {
    stopped: AtomicBool,
    at: Mutex<Option<u64>>,
    cv: Condvar,
}

impl StopSignal {
    pub fn new() -> Arc<Self> {
        Arc::new(StopSignal::default())
    }

    pub fn stop(&self, at_ns: u64) {
        let mut at = self.at.lock();
        if at.is_none() {
            *at = Some(at_ns);
        }
        self.stopped.store(true, Ordering::Release);
        self.cv.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped.load(Ordering::Acquire)
    }

    pub fn stopped_at(&self) -> Option<u64> {
        *self.at.lock()
    }

    /// Waits up to `timeout`; returns `true` if stopped.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let mut at = self.at.lock();
        if at.is_none() {
            self.cv.wait_for(&mut at, timeout);
        }
        at.is_some()
    }
}
