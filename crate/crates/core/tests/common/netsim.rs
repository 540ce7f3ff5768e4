//! Simulated hub-to-supervisor exchanges with configurable latency and
//! jitter, following the hub's schedule: a burst of nine samples 10 ms apart,
//! then one every 5 s.

use dhub_core::clocksync::{ClockEstimator, OffsetEstimate, SyncSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Link {
    /// Hub clock minus supervisor clock.
    pub hub_offset_ns: i64,
    pub latency_ns: f64,
    /// Uniform jitter half-width per leg.
    pub jitter_ns: f64,
    pub processing_ns: f64,
}

impl Link {
    pub fn lan(hub_offset_ns: i64) -> Link {
        Link { hub_offset_ns, latency_ns: 1e6, jitter_ns: 0.2e6, processing_ns: 20e3 }
    }
}

/// Supervisor-clock send times of the sync schedule up to `until_ns`.
pub fn schedule(start_ns: f64, until_ns: f64) -> Vec<f64> {
    let burst = (0..9).map(|i| start_ns + i as f64 * 10e6);
    let resync = (1..).map(|k| start_ns + 80e6 + k as f64 * 5e9).take_while(|&t| t <= until_ns);
    burst.chain(resync).collect()
}

/// One exchange started at supervisor time `t`; returns the sample and the
/// one-way asymmetry (forward minus backward latency).
pub fn exchange(link: &Link, t: f64, rng: &mut ChaCha8Rng) -> (SyncSample, f64) {
    let fwd = link.latency_ns + rng.gen_range(-link.jitter_ns..=link.jitter_ns);
    let back = link.latency_ns + rng.gen_range(-link.jitter_ns..=link.jitter_ns);
    let off = link.hub_offset_ns as f64;
    let t2 = t + fwd;
    let t3 = t2 + link.processing_ns;
    let s = SyncSample { t1: (t + off) as u64, t2: t2 as u64, t3: t3 as u64, t4: (t3 + back + off) as u64 };
    (s, fwd - back)
}

/// Runs the schedule through an estimator and returns the final estimate.
pub fn estimate(link: &Link, until_ns: f64, rng: &mut ChaCha8Rng) -> OffsetEstimate {
    let mut est = ClockEstimator::default();
    let mut last = None;
    for t in schedule(1e9, until_ns) {
        last = est.push(exchange(link, t, rng).0);
    }
    last.expect("at least one valid sample")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
