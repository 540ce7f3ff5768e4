//! proptest strategies shared by the property and acceptance targets.

use bytes::Bytes;
use dhub_core::clocksync::OffsetEstimate;
use dhub_core::simdev::AdapterSpec;
use dhub_core::wire::{
    ConnectionRole, ControlAck, ControlCommand, ControlRequest, ErrorCode, ErrorReport, FrameMessage, Hello,
    HubConfiguration, HubMetrics, Message, StreamMetrics, Subscription,
};
use dhub_core::{AdapterConfig, AdapterType, Frame, HubState, StreamConfig};
use proptest::prelude::*;

pub fn adapter_type() -> impl Strategy<Value = AdapterType> {
    prop_oneof![Just(AdapterType::SimUs), Just(AdapterType::SimRgbd), Just(AdapterType::SimPose)]
}

fn hub_state() -> impl Strategy<Value = HubState> {
    prop_oneof![Just(HubState::Idle), Just(HubState::Ready), Just(HubState::Streaming)]
}

fn text() -> impl Strategy<Value = String> {
    // includes quotes, escapes and non-ASCII to exercise the JSON bodies
    "[a-zA-Z0-9 _\"\\\\/é漢-]{0,24}"
}

/// Finite, non-negative floats; NaN has no JSON form.
fn rate() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 0.0..1000.0f64, any::<u32>().prop_map(|v| v as f64 / 7.0)]
}

fn estimate() -> impl Strategy<Value = OffsetEstimate> {
    (any::<i64>(), any::<u64>(), any::<u32>(), any::<u64>()).prop_map(|(o, r, n, d)| OffsetEstimate {
        offset_ns: o,
        rtt_ns: r,
        sample_count: n,
        dispersion_ns: d,
    })
}

fn stream_configs() -> impl Strategy<Value = Vec<StreamConfig>> {
    prop::collection::vec((adapter_type(), any::<u64>(), 1u32..1000, prop::option::of(1.0..300.0f64)), 0..3)
        .prop_map(|specs| {
            let mut out = Vec::new();
            for (t, seed, id, fps) in specs {
                for d in AdapterSpec::with_defaults(t, seed, "hub", id).descriptors {
                    out.push(StreamConfig {
                        descriptor: d,
                        adapter: AdapterConfig { adapter_type: t, seed, fps, jitter_ppm: 0, device: None },
                        codec_id: (seed % 2) as u8,
                    });
                }
            }
            out
        })
}

fn command() -> impl Strategy<Value = ControlCommand> {
    prop_oneof![
        (text(), stream_configs(), 1usize..4096, 1u64..10_000).prop_map(|(n, s, q, m)| {
            ControlCommand::Configure(HubConfiguration {
                session_name: n,
                streams: s,
                queue_capacity: q,
                metrics_interval_ms: m,
                external_codecs: vec![],
            })
        }),
        Just(ControlCommand::Start),
        Just(ControlCommand::Stop),
        Just(ControlCommand::Reset),
        Just(ControlCommand::Status),
    ]
}

fn stream_metrics() -> impl Strategy<Value = StreamMetrics> {
    (any::<u32>(), any::<[u64; 5]>(), rate()).prop_map(|(id, c, fps)| StreamMetrics {
        stream_id: id,
        captured: c[0],
        published: c[1],
        dropped: c[2],
        bytes_encoded: c[3],
        fps_1s: fps,
        queue_depth: c[4],
    })
}

pub fn frame_message(max_payload: usize) -> impl Strategy<Value = FrameMessage> {
    (any::<u32>(), any::<u64>(), any::<u64>(), any::<u64>(), any::<u16>(), any::<u8>(), prop::collection::vec(any::<u8>(), 0..max_payload))
        .prop_map(|(id, seq, cap, ses, flags, codec, p)| FrameMessage {
            flags,
            frame: Frame {
                stream_id: id,
                seq,
                capture_ts_ns: cap,
                session_ts_ns: ses,
                codec_id: codec,
                payload: Bytes::from(p),
            },
        })
}

/// Any valid message; `kind` selects the type (0..13).
pub fn message_of(kind: u8) -> BoxedStrategy<Message> {
    match kind {
        0 => (text(), any::<bool>(), prop::collection::vec(adapter_type(), 0..3), any::<bool>())
            .prop_map(|(id, data, caps, sep)| {
                Message::Hello(Hello {
                    hub_id: id,
                    role: if data { ConnectionRole::Data } else { ConnectionRole::Control },
                    capabilities: caps,
                    separate_data_connection: sep,
                })
            })
            .boxed(),
        1 => any::<u64>().prop_map(Message::Ping).boxed(),
        2 => any::<u64>().prop_map(Message::Pong).boxed(),
        3 => any::<u64>().prop_map(|t1| Message::TimesyncReq { t1 }).boxed(),
        4 => any::<[u64; 3]>().prop_map(|t| Message::TimesyncResp { t1: t[0], t2: t[1], t3: t[2] }).boxed(),
        5 => prop::collection::vec(any::<u32>(), 0..8)
            .prop_map(|ids| Message::Subscribe(Subscription { stream_ids: ids }))
            .boxed(),
        6 => prop::collection::vec(any::<u32>(), 0..8)
            .prop_map(|ids| Message::Unsubscribe(Subscription { stream_ids: ids }))
            .boxed(),
        7 => frame_message(512).prop_map(Message::Frame).boxed(),
        8 => (text(), hub_state(), any::<u64>(), prop::collection::vec(stream_metrics(), 0..4), prop::option::of(estimate()))
            .prop_map(|(id, st, ts, s, c)| {
                Message::Metrics(HubMetrics { hub_id: id, state: st, ts_ns: ts, streams: s, clock: c })
            })
            .boxed(),
        9 => (any::<u64>(), command()).prop_map(|(id, c)| Message::Control(ControlRequest { id, command: c })).boxed(),
        10 => (any::<u64>(), text(), hub_state())
            .prop_map(|(id, h, s)| Message::ControlAck(ControlAck { id, hub_id: h, state: s }))
            .boxed(),
        11 => (
            prop::option::of(any::<u64>()),
            prop_oneof![
                Just(ErrorCode::BadTransition),
                Just(ErrorCode::BadSpec),
                Just(ErrorCode::BadRequest),
                Just(ErrorCode::Internal)
            ],
            text(),
        )
            .prop_map(|(id, code, m)| Message::Error(ErrorReport { id, code, message: m }))
            .boxed(),
        _ => Just(Message::Bye).boxed(),
    }
}

pub fn message() -> impl Strategy<Value = Message> {
    (0u8..13).prop_flat_map(message_of)
}
