//! Domain types shared by every part of the system: stream descriptors,
//! frames, poses, the session configuration and its validator.
//!
//! Timestamps are unsigned nanoseconds. A frame carries two of them: the
//! capture time in the hub's monotonic clock and the session time in the
//! supervisor's clock domain (zero until a clock mapping has been applied).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::codec::ExternalCodecSpec;

/// Serialized size of a [`Pose`] payload.
pub const POSE_PAYLOAD_LEN: usize = 56;

pub const DEFAULT_QUEUE_CAPACITY: usize = 256;
pub const DEFAULT_METRICS_INTERVAL_MS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StreamKind {
    ImageRgb,
    ImageDepth,
    Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PixelFormat {
    Rgb8,
    Depth16,
    None,
}

/// Physical connector the device is attached through. Metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PortKind {
    HdmiIn,
    Ethernet,
    UsbC,
    UsbA,
    #[default]
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDescriptor {
    pub stream_id: u32,
    pub name: String,
    pub kind: StreamKind,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
    pub pixel_format: PixelFormat,
    pub nominal_fps: f64,
    pub source_hub: String,
    #[serde(default)]
    pub source_port_kind: PortKind,
}

impl StreamDescriptor {
    /// Checks the kind/format/dimension invariants of a single descriptor.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let at = format!("streams[id={}]", self.stream_id);
        let expected_format = match self.kind {
            StreamKind::ImageRgb => PixelFormat::Rgb8,
            StreamKind::ImageDepth => PixelFormat::Depth16,
            StreamKind::Pose => PixelFormat::None,
        };
        if self.pixel_format != expected_format {
            out.push(Violation::new(
                ViolationCode::BadPixelFormat,
                format!("{at}.pixel_format"),
                format!("{:?} stream requires {:?}, got {:?}", self.kind, expected_format, self.pixel_format),
            ));
        }
        match self.kind {
            StreamKind::Pose => {
                if self.width != 0 || self.height != 0 {
                    out.push(Violation::new(
                        ViolationCode::BadDimensions,
                        format!("{at}.width"),
                        "POSE streams must have width = height = 0".into(),
                    ));
                }
            }
            _ => {
                if self.width == 0 || self.height == 0 {
                    out.push(Violation::new(
                        ViolationCode::BadDimensions,
                        format!("{at}.width"),
                        "image streams need width and height > 0".into(),
                    ));
                } else if (self.width as u64) * (self.height as u64) * 3 < 16 {
                    out.push(Violation::new(
                        ViolationCode::BadDimensions,
                        format!("{at}.width"),
                        "image too small to carry the frame header".into(),
                    ));
                } else if self.width as u64 * self.height as u64 * 3 > u32::MAX as u64 / 2 {
                    out.push(Violation::new(
                        ViolationCode::PayloadTooLarge,
                        format!("{at}.width"),
                        "frame payload exceeds the wire size limit".into(),
                    ));
                }
            }
        }
        if !(self.nominal_fps.is_finite() && self.nominal_fps > 0.0) {
            out.push(Violation::new(
                ViolationCode::BadFps,
                format!("{at}.nominal_fps"),
                format!("nominal_fps must be > 0, got {}", self.nominal_fps),
            ));
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }
}

/// Decoded payload size in bytes for a stream. The descriptor must be valid.
pub fn payload_size(desc: &StreamDescriptor) -> usize {
    let pixels = desc.width as usize * desc.height as usize;
    match desc.pixel_format {
        PixelFormat::Rgb8 => pixels * 3,
        PixelFormat::Depth16 => pixels * 2,
        PixelFormat::None => POSE_PAYLOAD_LEN,
    }
}

/// The unit of transport and storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub stream_id: u32,
    pub seq: u64,
    pub capture_ts_ns: u64,
    pub session_ts_ns: u64,
    pub codec_id: u8,
    pub payload: Bytes,
}

/// Position in meters and orientation as a unit quaternion (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl Pose {
    pub fn orientation_norm(&self) -> f64 {
        self.orientation.iter().map(|q| q * q).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.orientation_norm() - 1.0).abs() <= 1e-9
    }

    /// Big-endian (px, py, pz, qw, qx, qy, qz).
    pub fn to_bytes(&self) -> [u8; POSE_PAYLOAD_LEN] {
        let mut out = [0u8; POSE_PAYLOAD_LEN];
        let values = self.position.iter().chain(self.orientation.iter());
        for (chunk, v) in out.chunks_exact_mut(8).zip(values) {
            chunk.copy_from_slice(&v.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Pose> {
        if bytes.len() != POSE_PAYLOAD_LEN {
            return None;
        }
        let mut v = [0f64; 7];
        for (slot, chunk) in v.iter_mut().zip(bytes.chunks_exact(8)) {
            *slot = f64::from_be_bytes(chunk.try_into().unwrap());
        }
        Some(Pose {
            position: [v[0], v[1], v[2]],
            orientation: [v[3], v[4], v[5], v[6]],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdapterType {
    SimUs,
    SimPose,
    SimRgbd,
}

impl AdapterType {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterType::SimUs => "SIM_US",
            AdapterType::SimPose => "SIM_POSE",
            AdapterType::SimRgbd => "SIM_RGBD",
        }
    }

    fn produces(self, kind: StreamKind) -> bool {
        matches!(
            (self, kind),
            (AdapterType::SimUs, StreamKind::ImageRgb)
                | (AdapterType::SimPose, StreamKind::Pose)
                | (AdapterType::SimRgbd, StreamKind::ImageRgb)
                | (AdapterType::SimRgbd, StreamKind::ImageDepth)
        )
    }
}

/// Per-stream adapter settings. Streams of one `SIM_RGBD` device share the
/// same `device` name and are driven by a single lock-stepped adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    #[serde(rename = "type")]
    pub adapter_type: AdapterType,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the descriptor's nominal_fps when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default)]
    pub jitter_ppm: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    #[serde(flatten)]
    pub descriptor: StreamDescriptor,
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub codec_id: u8,
}

impl StreamConfig {
    pub fn effective_fps(&self) -> f64 {
        self.adapter.fps.unwrap_or(self.descriptor.nominal_fps)
    }

    /// Adapter instance key: streams with the same key share one adapter.
    pub fn device_key(&self) -> String {
        match &self.adapter.device {
            Some(d) => d.clone(),
            None => match self.adapter.adapter_type {
                AdapterType::SimRgbd => "rgbd".to_string(),
                _ => format!("stream-{}", self.descriptor.stream_id),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubAddress {
    pub hub_id: String,
    #[serde(default)]
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_name: String,
    pub hubs: Vec<HubAddress>,
    pub streams: Vec<StreamConfig>,
    pub storage_dir: String,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_metrics_interval")]
    pub metrics_interval_ms: u64,
    /// Process-backed codecs available to streams (ids 128..=255).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub external_codecs: Vec<ExternalCodecSpec>,
}

fn default_queue_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

fn default_metrics_interval() -> u64 {
    DEFAULT_METRICS_INTERVAL_MS
}

impl SessionConfig {
    pub fn streams_for_hub<'a>(&'a self, hub_id: &'a str) -> impl Iterator<Item = &'a StreamConfig> + 'a {
        self.streams.iter().filter(move |s| s.descriptor.source_hub == hub_id)
    }

    /// Hubs that host at least one stream.
    pub fn active_hubs(&self) -> Vec<String> {
        let mut hubs: Vec<String> = self.streams.iter().map(|s| s.descriptor.source_hub.clone()).collect();
        hubs.sort();
        hubs.dedup();
        hubs
    }

    pub fn stream(&self, stream_id: u32) -> Option<&StreamConfig> {
        self.streams.iter().find(|s| s.descriptor.stream_id == stream_id)
    }
}

/// Lifecycle state of a hub daemon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HubState {
    Idle,
    Ready,
    Streaming,
}

impl HubState {
    pub const ALL: [HubState; 3] = [HubState::Idle, HubState::Ready, HubState::Streaming];
}

/// Per-stream adapter status as reported by a hub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterStatus {
    pub stream_id: u32,
    pub adapter_type: AdapterType,
    pub running: bool,
}

/// Registry view of one hub, as served by the supervisor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubInfo {
    pub hub_id: String,
    pub address: String,
    pub connected: bool,
    pub state: HubState,
    pub adapters: Vec<AdapterStatus>,
    pub last_heartbeat_ts: u64,
    pub clock_offset_ns: Option<i64>,
    pub clock_rtt_ns: Option<u64>,
    pub clock_dispersion_ns: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    EmptySessionName,
    EmptyStorageDir,
    DupHubId,
    DupStreamId,
    UnknownHub,
    BadFps,
    BadDimensions,
    BadPixelFormat,
    PayloadTooLarge,
    AdapterKindMismatch,
    RgbdPairing,
    BadJitter,
    ReservedCodec,
    UnknownCodec,
    DupCodecId,
    BadQueueCapacity,
    BadMetricsInterval,
    /// The body is not a well-formed configuration document.
    BadJson,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("UNKNOWN"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(code: ViolationCode, field: String, message: String) -> Self {
        Violation { code, field, message }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.code, self.field, self.message)
    }
}

/// Validates the stream list of one hub (or of a whole session when `hubs`
/// is `None`, in which case the hub references are not checked here).
pub fn validate_streams(streams: &[StreamConfig], hubs: Option<&HashSet<&str>>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for s in streams {
        let d = &s.descriptor;
        let at = format!("streams[id={}]", d.stream_id);
        if !seen.insert(d.stream_id) {
            out.push(Violation::new(
                ViolationCode::DupStreamId,
                format!("{at}.stream_id"),
                format!("stream_id {} is used more than once", d.stream_id),
            ));
        }
        if let Some(hubs) = hubs {
            if !hubs.contains(d.source_hub.as_str()) {
                out.push(Violation::new(
                    ViolationCode::UnknownHub,
                    format!("{at}.source_hub"),
                    format!("hub {:?} is not listed in hubs", d.source_hub),
                ));
            }
        }
        out.extend(d.violations());
        if let Some(fps) = s.adapter.fps {
            if !(fps.is_finite() && fps > 0.0) {
                out.push(Violation::new(
                    ViolationCode::BadFps,
                    format!("{at}.adapter.fps"),
                    format!("fps override must be > 0, got {fps}"),
                ));
            }
        }
        if s.adapter.jitter_ppm >= 500_000 {
            out.push(Violation::new(
                ViolationCode::BadJitter,
                format!("{at}.adapter.jitter_ppm"),
                "jitter must stay below half a period (500000 ppm)".into(),
            ));
        }
        if !s.adapter.adapter_type.produces(d.kind) {
            out.push(Violation::new(
                ViolationCode::AdapterKindMismatch,
                format!("{at}.adapter.type"),
                format!("{} cannot produce {:?} streams", s.adapter.adapter_type.as_str(), d.kind),
            ));
        }
        if (2..128).contains(&s.codec_id) {
            out.push(Violation::new(
                ViolationCode::ReservedCodec,
                format!("{at}.codec_id"),
                format!("codec id {} is reserved", s.codec_id),
            ));
        }
    }

    // SIM_RGBD devices: exactly one RGB and one depth stream per device,
    // on the same hub, with matching resolution and rate.
    let mut devices: BTreeMap<(String, String), Vec<&StreamConfig>> = BTreeMap::new();
    for s in streams.iter().filter(|s| s.adapter.adapter_type == AdapterType::SimRgbd) {
        devices
            .entry((s.descriptor.source_hub.clone(), s.device_key()))
            .or_default()
            .push(s);
    }
    for ((hub, device), members) in devices {
        let rgb = members.iter().filter(|s| s.descriptor.kind == StreamKind::ImageRgb).count();
        let depth = members.iter().filter(|s| s.descriptor.kind == StreamKind::ImageDepth).count();
        let same_shape = members.windows(2).all(|w| {
            w[0].descriptor.width == w[1].descriptor.width
                && w[0].descriptor.height == w[1].descriptor.height
                && w[0].effective_fps() == w[1].effective_fps()
                && w[0].adapter.seed == w[1].adapter.seed
        });
        if rgb != 1 || depth != 1 || members.len() != 2 || !same_shape {
            out.push(Violation::new(
                ViolationCode::RgbdPairing,
                format!("hubs[{hub}].device[{device}]"),
                "an RGB-D device needs exactly one RGB and one depth stream with equal resolution, fps and seed".into(),
            ));
        }
    }
    out
}

/// Checks external codec declarations and that every stream's codec exists.
pub fn validate_codecs(streams: &[StreamConfig], external: &[ExternalCodecSpec]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for c in external {
        let at = format!("external_codecs[id={}]", c.codec_id);
        if c.codec_id < crate::codec::EXTERNAL_MIN {
            out.push(Violation::new(
                ViolationCode::ReservedCodec,
                at.clone(),
                "external codecs must use ids 128..=255".into(),
            ));
        }
        if !ids.insert(c.codec_id) {
            out.push(Violation::new(ViolationCode::DupCodecId, at, "codec id declared twice".into()));
        }
    }
    for s in streams {
        if s.codec_id >= crate::codec::EXTERNAL_MIN && !ids.contains(&s.codec_id) {
            out.push(Violation::new(
                ViolationCode::UnknownCodec,
                format!("streams[id={}].codec_id", s.descriptor.stream_id),
                format!("codec {} is not declared in external_codecs", s.codec_id),
            ));
        }
    }
    out
}

/// Returns every violated invariant of a session configuration.
pub fn validate_session_config(cfg: &SessionConfig) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if cfg.session_name.trim().is_empty() {
        out.push(Violation::new(
            ViolationCode::EmptySessionName,
            "session_name".into(),
            "session_name must not be empty".into(),
        ));
    }
    if cfg.storage_dir.trim().is_empty() {
        out.push(Violation::new(
            ViolationCode::EmptyStorageDir,
            "storage_dir".into(),
            "storage_dir must not be empty".into(),
        ));
    }
    if cfg.queue_capacity == 0 {
        out.push(Violation::new(
            ViolationCode::BadQueueCapacity,
            "queue_capacity".into(),
            "queue_capacity must be >= 1".into(),
        ));
    }
    if cfg.metrics_interval_ms == 0 {
        out.push(Violation::new(
            ViolationCode::BadMetricsInterval,
            "metrics_interval_ms".into(),
            "metrics_interval_ms must be >= 1".into(),
        ));
    }
    let mut hub_ids: HashMap<&str, usize> = HashMap::new();
    for h in &cfg.hubs {
        *hub_ids.entry(h.hub_id.as_str()).or_default() += 1;
    }
    for (id, n) in &hub_ids {
        if *n > 1 {
            out.push(Violation::new(
                ViolationCode::DupHubId,
                format!("hubs[{id}]"),
                format!("hub {id:?} listed {n} times"),
            ));
        }
    }
    let known: HashSet<&str> = hub_ids.keys().copied().collect();
    out.extend(validate_streams(&cfg.streams, Some(&known)));
    out.extend(validate_codecs(&cfg.streams, &cfg.external_codecs));
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RateError {
    #[error("invalid argument: window must be > 0")]
    InvalidWindow,
}

/// Mean rate over the trailing window ending at the last timestamp:
/// frames with `ts > last - window`, divided by the window in seconds.
pub fn mean_fps(timestamps: &[u64], window_ns: i64) -> Result<f64, RateError> {
    match timestamps.last() {
        Some(&last) => mean_fps_at(timestamps, window_ns, last),
        None if window_ns <= 0 => Err(RateError::InvalidWindow),
        None => Ok(0.0),
    }
}

/// Same as [`mean_fps`] but with an explicit window end (e.g. "now").
pub fn mean_fps_at(timestamps: &[u64], window_ns: i64, end_ns: u64) -> Result<f64, RateError> {
    if window_ns <= 0 {
        return Err(RateError::InvalidWindow);
    }
    let start = end_ns as i128 - window_ns as i128;
    let lo = timestamps.partition_point(|&t| (t as i128) <= start);
    let hi = timestamps.partition_point(|&t| t <= end_ns);
    let count = hi.saturating_sub(lo);
    Ok(count as f64 / (window_ns as f64 / 1e9))
}
