//! Binary message framing for hub <-> supervisor traffic.
//!
//! ```text
//! "DH" | version u8 | type u8 | payload_len u32 | payload | crc u32
//! ```
//!
//! All integers are big-endian; `crc` is CRC-32C over every preceding byte
//! of the message. Control-plane payloads are UTF-8 JSON, `FRAME` and the
//! ping/timesync messages are fixed binary layouts.

use std::io::Read;

use bytes::{Buf, Bytes, BytesMut};
use serde::{Deserialize, Serialize};

use crate::clocksync::OffsetEstimate;
use crate::types::{AdapterType, Frame, HubState, StreamConfig};

pub const MAGIC: [u8; 2] = *b"DH";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 8;
pub const CRC_LEN: usize = 4;
/// Fixed part of a FRAME payload preceding the frame data.
pub const FRAME_HEADER_LEN: usize = 32;
pub const DEFAULT_PORT: u16 = 7401;

/// FRAME flag: `session_ts_ns` was stamped from a clock estimate.
pub const FLAG_SESSION_TS_VALID: u16 = 0x0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0x01,
    Ping = 0x02,
    Pong = 0x03,
    TimesyncReq = 0x04,
    TimesyncResp = 0x05,
    Subscribe = 0x06,
    Unsubscribe = 0x07,
    Frame = 0x08,
    Metrics = 0x09,
    Control = 0x0A,
    ControlAck = 0x0B,
    Error = 0x0C,
    Bye = 0x0D,
}

impl MessageType {
    pub const ALL: [MessageType; 13] = [
        MessageType::Hello,
        MessageType::Ping,
        MessageType::Pong,
        MessageType::TimesyncReq,
        MessageType::TimesyncResp,
        MessageType::Subscribe,
        MessageType::Unsubscribe,
        MessageType::Frame,
        MessageType::Metrics,
        MessageType::Control,
        MessageType::ControlAck,
        MessageType::Error,
        MessageType::Bye,
    ];

    pub fn from_u8(v: u8) -> Option<MessageType> {
        MessageType::ALL.get((v as usize).wrapping_sub(1)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConnectionRole {
    /// Control and data interleaved on one connection.
    #[default]
    Control,
    /// FRAME messages only.
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub hub_id: String,
    #[serde(default)]
    pub role: ConnectionRole,
    #[serde(default)]
    pub capabilities: Vec<AdapterType>,
    /// The hub will open a second, data-only connection for FRAME traffic.
    #[serde(default)]
    pub separate_data_connection: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub stream_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMetrics {
    pub stream_id: u32,
    pub captured: u64,
    pub published: u64,
    pub dropped: u64,
    pub bytes_encoded: u64,
    pub fps_1s: f64,
    pub queue_depth: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubMetrics {
    pub hub_id: String,
    pub state: HubState,
    /// Hub monotonic time when the snapshot was taken.
    pub ts_ns: u64,
    pub streams: Vec<StreamMetrics>,
    pub clock: Option<OffsetEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubConfiguration {
    pub session_name: String,
    pub streams: Vec<StreamConfig>,
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_interval")]
    pub metrics_interval_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub external_codecs: Vec<crate::codec::ExternalCodecSpec>,
}

fn default_capacity() -> usize {
    crate::types::DEFAULT_QUEUE_CAPACITY
}

fn default_interval() -> u64 {
    crate::types::DEFAULT_METRICS_INTERVAL_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlCommand {
    Configure(HubConfiguration),
    Start,
    Stop,
    Reset,
    Status,
}

impl ControlCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::Configure(_) => "CONFIGURE",
            ControlCommand::Start => "START",
            ControlCommand::Stop => "STOP",
            ControlCommand::Reset => "RESET",
            ControlCommand::Status => "STATUS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRequest {
    pub id: u64,
    pub command: ControlCommand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlAck {
    pub id: u64,
    pub hub_id: String,
    pub state: HubState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    BadTransition,
    BadSpec,
    BadRequest,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub id: Option<u64>,
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMessage {
    pub flags: u16,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Ping(u64),
    Pong(u64),
    TimesyncReq { t1: u64 },
    TimesyncResp { t1: u64, t2: u64, t3: u64 },
    Subscribe(Subscription),
    Unsubscribe(Subscription),
    Frame(FrameMessage),
    Metrics(HubMetrics),
    Control(ControlRequest),
    ControlAck(ControlAck),
    Error(ErrorReport),
    Bye,
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Hello(_) => MessageType::Hello,
            Message::Ping(_) => MessageType::Ping,
            Message::Pong(_) => MessageType::Pong,
            Message::TimesyncReq { .. } => MessageType::TimesyncReq,
            Message::TimesyncResp { .. } => MessageType::TimesyncResp,
            Message::Subscribe(_) => MessageType::Subscribe,
            Message::Unsubscribe(_) => MessageType::Unsubscribe,
            Message::Frame(_) => MessageType::Frame,
            Message::Metrics(_) => MessageType::Metrics,
            Message::Control(_) => MessageType::Control,
            Message::ControlAck(_) => MessageType::ControlAck,
            Message::Error(_) => MessageType::Error,
            Message::Bye => MessageType::Bye,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the u32 length field")]
    Oversize(usize),
    #[error("json encoding failed: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("BAD_MAGIC")]
    BadMagic,
    #[error("BAD_VERSION: {0:#04x}")]
    BadVersion(u8),
    #[error("UNKNOWN_TYPE: {0:#04x}")]
    UnknownType(u8),
    /// Not fatal for stream decoding: `needed` is the minimum total number
    /// of bytes required before decoding can make progress.
    #[error("TRUNCATED: need at least {needed} bytes")]
    Truncated { needed: usize },
    #[error("CRC_MISMATCH: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("BAD_JSON: {0}")]
    BadJson(String),
    #[error("BAD_PAYLOAD: {0}")]
    BadPayload(&'static str),
    #[error("OVERSIZE: payload of {0} bytes exceeds the configured limit")]
    Oversize(u32),
}

impl DecodeError {
    pub fn code(&self) -> &'static str {
        match self {
            DecodeError::BadMagic => "BAD_MAGIC",
            DecodeError::BadVersion(_) => "BAD_VERSION",
            DecodeError::UnknownType(_) => "UNKNOWN_TYPE",
            DecodeError::Truncated { .. } => "TRUNCATED",
            DecodeError::CrcMismatch { .. } => "CRC_MISMATCH",
            DecodeError::BadJson(_) => "BAD_JSON",
            DecodeError::BadPayload(_) => "BAD_PAYLOAD",
            DecodeError::Oversize(_) => "OVERSIZE",
        }
    }
}

fn put_header(out: &mut Vec<u8>, ty: MessageType, payload_len: u32) {
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(ty as u8);
    out.extend_from_slice(&payload_len.to_be_bytes());
}

fn put_json<T: Serialize>(out: &mut Vec<u8>, ty: MessageType, value: &T) -> Result<(), EncodeError> {
    let body = serde_json::to_vec(value)?;
    let len = u32::try_from(body.len()).map_err(|_| EncodeError::Oversize(body.len()))?;
    put_header(out, ty, len);
    out.extend_from_slice(&body);
    Ok(())
}

/// Appends the encoding of `msg` to `out`.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let start = out.len();
    let ty = msg.message_type();
    match msg {
        Message::Hello(v) => put_json(out, ty, v)?,
        Message::Subscribe(v) | Message::Unsubscribe(v) => put_json(out, ty, v)?,
        Message::Metrics(v) => put_json(out, ty, v)?,
        Message::Control(v) => put_json(out, ty, v)?,
        Message::ControlAck(v) => put_json(out, ty, v)?,
        Message::Error(v) => put_json(out, ty, v)?,
        Message::Ping(n) | Message::Pong(n) => {
            put_header(out, ty, 8);
            out.extend_from_slice(&n.to_be_bytes());
        }
        Message::TimesyncReq { t1 } => {
            put_header(out, ty, 8);
            out.extend_from_slice(&t1.to_be_bytes());
        }
        Message::TimesyncResp { t1, t2, t3 } => {
            put_header(out, ty, 24);
            for t in [t1, t2, t3] {
                out.extend_from_slice(&t.to_be_bytes());
            }
        }
        Message::Frame(fm) => {
            let len = FRAME_HEADER_LEN + fm.frame.payload.len();
            let len = u32::try_from(len).map_err(|_| EncodeError::Oversize(len))?;
            out.reserve(HEADER_LEN + len as usize + CRC_LEN);
            put_header(out, ty, len);
            put_frame_header(out, &fm.frame, fm.flags);
            out.extend_from_slice(&fm.frame.payload);
        }
        Message::Bye => put_header(out, ty, 0),
    }
    let crc = crc32c::crc32c(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(())
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    encode_into(msg, &mut out)?;
    Ok(out)
}

fn put_frame_header(out: &mut Vec<u8>, frame: &Frame, flags: u16) {
    out.extend_from_slice(&frame.stream_id.to_be_bytes());
    out.extend_from_slice(&frame.seq.to_be_bytes());
    out.extend_from_slice(&frame.capture_ts_ns.to_be_bytes());
    out.extend_from_slice(&frame.session_ts_ns.to_be_bytes());
    out.extend_from_slice(&flags.to_be_bytes());
    out.push(frame.codec_id);
    out.push(0);
}

/// Builds a FRAME message in place so the frame data can be written
/// straight into the output buffer (e.g. by a codec) without a copy.
pub struct FrameWriter<'a> {
    out: &'a mut Vec<u8>,
    start: usize,
}

impl<'a> FrameWriter<'a> {
    /// `frame.payload` is ignored; append the data via [`FrameWriter::data`].
    pub fn begin(out: &'a mut Vec<u8>, frame: &Frame, flags: u16) -> Self {
        let start = out.len();
        put_header(out, MessageType::Frame, 0);
        put_frame_header(out, frame, flags);
        FrameWriter { out, start }
    }

    pub fn data(&mut self) -> &mut Vec<u8> {
        self.out
    }

    pub fn finish(self) -> Result<(), EncodeError> {
        let payload_len = self.out.len() - self.start - HEADER_LEN;
        let len = u32::try_from(payload_len).map_err(|_| EncodeError::Oversize(payload_len))?;
        self.out[self.start + 4..self.start + 8].copy_from_slice(&len.to_be_bytes());
        let crc = crc32c::crc32c(&self.out[self.start..]);
        self.out.extend_from_slice(&crc.to_be_bytes());
        Ok(())
    }
}

/// Validates the fixed header fields available in `buf` and returns the
/// declared payload length once the full header is present.
fn check_header(buf: &[u8]) -> Result<Option<u32>, DecodeError> {
    if buf.first().is_some_and(|&b| b != MAGIC[0]) || buf.get(1).is_some_and(|&b| b != MAGIC[1]) {
        return Err(DecodeError::BadMagic);
    }
    if let Some(&v) = buf.get(2) {
        if v != VERSION {
            return Err(DecodeError::BadVersion(v));
        }
    }
    if let Some(&t) = buf.get(3) {
        if MessageType::from_u8(t).is_none() {
            return Err(DecodeError::UnknownType(t));
        }
    }
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    Ok(Some(u32::from_be_bytes(buf[4..8].try_into().unwrap())))
}

fn json<T: for<'de> Deserialize<'de>>(payload: &[u8]) -> Result<T, DecodeError> {
    serde_json::from_slice(payload).map_err(|e| DecodeError::BadJson(e.to_string()))
}

fn be_u64(b: &[u8]) -> u64 {
    u64::from_be_bytes(b[..8].try_into().unwrap())
}

/// Parses a CRC-checked payload. `frame_data` turns the frame data range of
/// the payload into a `Bytes` (zero-copy when the caller owns a `Bytes`).
fn parse_payload(
    ty: MessageType,
    payload: &[u8],
    frame_data: impl FnOnce(std::ops::Range<usize>) -> Bytes,
) -> Result<Message, DecodeError> {
    let fixed = |n: usize| {
        if payload.len() == n {
            Ok(())
        } else {
            Err(DecodeError::BadPayload("unexpected payload length"))
        }
    };
    Ok(match ty {
        MessageType::Hello => Message::Hello(json(payload)?),
        MessageType::Ping => {
            fixed(8)?;
            Message::Ping(be_u64(payload))
        }
        MessageType::Pong => {
            fixed(8)?;
            Message::Pong(be_u64(payload))
        }
        MessageType::TimesyncReq => {
            fixed(8)?;
            Message::TimesyncReq { t1: be_u64(payload) }
        }
        MessageType::TimesyncResp => {
            fixed(24)?;
            Message::TimesyncResp {
                t1: be_u64(payload),
                t2: be_u64(&payload[8..]),
                t3: be_u64(&payload[16..]),
            }
        }
        MessageType::Subscribe => Message::Subscribe(json(payload)?),
        MessageType::Unsubscribe => Message::Unsubscribe(json(payload)?),
        MessageType::Frame => {
            if payload.len() < FRAME_HEADER_LEN {
                return Err(DecodeError::BadPayload("frame header truncated"));
            }
            let mut h = &payload[..FRAME_HEADER_LEN];
            let stream_id = h.get_u32();
            let seq = h.get_u64();
            let capture_ts_ns = h.get_u64();
            let session_ts_ns = h.get_u64();
            let flags = h.get_u16();
            let codec_id = h.get_u8();
            if h.get_u8() != 0 {
                return Err(DecodeError::BadPayload("reserved frame byte is not zero"));
            }
            Message::Frame(FrameMessage {
                flags,
                frame: Frame {
                    stream_id,
                    seq,
                    capture_ts_ns,
                    session_ts_ns,
                    codec_id,
                    payload: frame_data(FRAME_HEADER_LEN..payload.len()),
                },
            })
        }
        MessageType::Metrics => Message::Metrics(json(payload)?),
        MessageType::Control => Message::Control(json(payload)?),
        MessageType::ControlAck => Message::ControlAck(json(payload)?),
        MessageType::Error => Message::Error(json(payload)?),
        MessageType::Bye => {
            fixed(0)?;
            Message::Bye
        }
    })
}

/// Total length of the message at the start of `buf`, once it is complete.
fn message_extent(buf: &[u8], max_payload: u32) -> Result<usize, DecodeError> {
    let Some(len) = check_header(buf)? else {
        return Err(DecodeError::Truncated { needed: HEADER_LEN + CRC_LEN });
    };
    if len > max_payload {
        return Err(DecodeError::Oversize(len));
    }
    let total = HEADER_LEN + len as usize + CRC_LEN;
    if buf.len() < total {
        return Err(DecodeError::Truncated { needed: total });
    }
    Ok(total)
}

/// Checks framing and CRC of the message at the start of `buf`; returns the
/// message type, payload range and total encoded length.
fn frame_bounds(buf: &[u8], max_payload: u32) -> Result<(MessageType, std::ops::Range<usize>, usize), DecodeError> {
    let total = message_extent(buf, max_payload)?;
    let body_end = total - CRC_LEN;
    let stored = u32::from_be_bytes(buf[body_end..total].try_into().unwrap());
    let computed = crc32c::crc32c(&buf[..body_end]);
    if stored != computed {
        return Err(DecodeError::CrcMismatch { stored, computed });
    }
    let ty = MessageType::from_u8(buf[3]).expect("checked by check_header");
    Ok((ty, HEADER_LEN..body_end, total))
}

/// Decodes exactly one message from the start of `bytes`, returning it with
/// the number of bytes consumed.
pub fn decode_message(bytes: &[u8]) -> Result<(Message, usize), DecodeError> {
    let (ty, range, total) = frame_bounds(bytes, u32::MAX)?;
    let payload = &bytes[range];
    let msg = parse_payload(ty, payload, |r| Bytes::copy_from_slice(&payload[r]))?;
    Ok((msg, total))
}

/// Zero-copy variant of [`decode_message`] for an owned buffer.
pub fn decode_message_bytes(bytes: &Bytes, max_payload: u32) -> Result<(Message, usize), DecodeError> {
    let (ty, range, total) = frame_bounds(bytes, max_payload)?;
    let payload = bytes.slice(range);
    let msg = parse_payload(ty, &payload, |r| payload.slice(r))?;
    Ok((msg, total))
}

/// Incremental decoder for a byte stream owned by a single reader.
pub struct StreamDecoder {
    buf: BytesMut,
    max_payload: u32,
    scratch: Vec<u8>,
}

impl Default for StreamDecoder {
    fn default() -> Self {
        StreamDecoder::new(64 << 20)
    }
}

impl StreamDecoder {
    pub fn new(max_payload: u32) -> Self {
        StreamDecoder { buf: BytesMut::with_capacity(1 << 16), max_payload, scratch: Vec::new() }
    }

    pub fn push(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    /// Direct access for readers that fill the buffer themselves.
    pub fn buffer_mut(&mut self) -> &mut BytesMut {
        &mut self.buf
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete message, `Ok(None)` when more bytes are needed.
    /// Any other error leaves the stream unusable.
    pub fn next_message(&mut self) -> Result<Option<Message>, DecodeError> {
        match message_extent(&self.buf, self.max_payload) {
            Ok(total) => {
                let chunk = self.buf.split_to(total).freeze();
                let (msg, _) = decode_message_bytes(&chunk, self.max_payload)?;
                Ok(Some(msg))
            }
            Err(DecodeError::Truncated { needed }) => {
                self.buf.reserve(needed.saturating_sub(self.buf.len()));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Blocking read of the next message from `reader`. Returns `Ok(None)`
    /// on a clean end of stream at a message boundary.
    pub fn read_from<R: Read>(&mut self, reader: &mut R) -> std::io::Result<Option<Message>> {
        loop {
            if let Some(msg) = self.next_message().map_err(invalid_data)? {
                return Ok(Some(msg));
            }
            if self.scratch.is_empty() {
                self.scratch = vec![0u8; 1 << 20];
            }
            let n = match reader.read(&mut self.scratch) {
                Ok(n) => n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            };
            self.buf.extend_from_slice(&self.scratch[..n]);
            if n == 0 {
                return if self.buf.is_empty() {
                    Ok(None)
                } else {
                    Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "stream ended mid-message"))
                };
            }
        }
    }
}

fn invalid_data(e: DecodeError) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, e)
}

impl From<Frame> for Message {
    fn from(frame: Frame) -> Self {
        Message::Frame(FrameMessage { flags: 0, frame })
    }
}
