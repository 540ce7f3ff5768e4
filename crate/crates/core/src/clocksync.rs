//! Two-way time transfer between a hub and the supervisor.
//!
//! The hub sends `t1`, the supervisor stamps receive (`t2`) and reply (`t3`)
//! times, the hub stamps `t4` on arrival. Offsets are `supervisor - hub`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub const DEFAULT_WINDOW: usize = 9;
/// Interval between resync requests from a hub.
pub const RESYNC_PERIOD_NS: u64 = 5_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncSample {
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub t4: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    pub offset_ns: i64,
    pub rtt_ns: u64,
    pub sample_count: u32,
    pub dispersion_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ClockError {
    #[error("INVALID_SAMPLE: negative round trip or reversed timestamps")]
    InvalidSample,
    #[error("NO_SYNC: no valid sync sample available")]
    NoSync,
}

/// Offset and round-trip time of one exchange. The offset is rounded toward zero.
pub fn sample_offset(s: &SyncSample) -> Result<(i64, u64), ClockError> {
    if s.t4 < s.t1 || s.t3 < s.t2 {
        return Err(ClockError::InvalidSample);
    }
    let (t1, t2, t3, t4) = (s.t1 as i128, s.t2 as i128, s.t3 as i128, s.t4 as i128);
    let rtt = (t4 - t1) - (t3 - t2);
    if rtt < 0 {
        return Err(ClockError::InvalidSample);
    }
    let offset = ((t2 - t1) + (t3 - t4)) / 2;
    let offset = i64::try_from(offset).map_err(|_| ClockError::InvalidSample)?;
    Ok((offset, rtt as u64))
}

fn median_i64(sorted: &[i64]) -> i64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        ((sorted[n / 2 - 1] as i128 + sorted[n / 2] as i128) / 2) as i64
    }
}

/// Median of the offsets of the ⌈window/3⌉ lowest-RTT valid samples among
/// the most recent `window` samples.
pub fn estimate_offset(samples: &[SyncSample], window: usize) -> Result<OffsetEstimate, ClockError> {
    let window = window.max(1);
    let recent = &samples[samples.len().saturating_sub(window)..];
    let mut valid: Vec<(u64, i64)> = recent
        .iter()
        .filter_map(|s| sample_offset(s).ok())
        .map(|(offset, rtt)| (rtt, offset))
        .collect();
    if valid.is_empty() {
        return Err(ClockError::NoSync);
    }
    valid.sort_unstable();
    valid.truncate(window.div_ceil(3));

    let mut offsets: Vec<i64> = valid.iter().map(|&(_, o)| o).collect();
    offsets.sort_unstable();
    let offset = median_i64(&offsets);
    let mut deviations: Vec<i64> = offsets.iter().map(|&o| (o as i128 - offset as i128).unsigned_abs() as i64).collect();
    deviations.sort_unstable();
    Ok(OffsetEstimate {
        offset_ns: offset,
        rtt_ns: valid[0].0,
        sample_count: valid.len() as u32,
        dispersion_ns: median_i64(&deviations) as u64,
    })
}

/// Maps a hub capture timestamp into session time, saturating at the u64 range.
pub fn to_session_time(capture_ts_ns: u64, est: &OffsetEstimate) -> u64 {
    let t = capture_ts_ns as i128 + est.offset_ns as i128;
    t.clamp(0, u64::MAX as i128) as u64
}

/// Per-hub estimator keeping the most recent `window` samples.
#[derive(Debug, Clone)]
pub struct ClockEstimator {
    window: usize,
    samples: VecDeque<SyncSample>,
    current: Option<OffsetEstimate>,
}

impl Default for ClockEstimator {
    fn default() -> Self {
        ClockEstimator::new(DEFAULT_WINDOW)
    }
}

impl ClockEstimator {
    pub fn new(window: usize) -> Self {
        ClockEstimator { window: window.max(1), samples: VecDeque::new(), current: None }
    }

    /// Adds a sample and refreshes the estimate. Invalid samples still take a
    /// slot in the window.
    pub fn push(&mut self, sample: SyncSample) -> Option<OffsetEstimate> {
        if self.samples.len() == self.window {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
        let samples: Vec<SyncSample> = self.samples.iter().copied().collect();
        if let Ok(est) = estimate_offset(&samples, self.window) {
            self.current = Some(est);
        }
        self.current
    }

    pub fn current(&self) -> Option<OffsetEstimate> {
        self.current
    }
}
