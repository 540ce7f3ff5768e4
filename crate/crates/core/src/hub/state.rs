//! The hub's control table as a pure function.

use crate::types::{validate_codecs, validate_streams, HubState, Violation, ViolationCode};
use crate::wire::{ControlAck, ControlCommand, ControlRequest, ErrorCode, ErrorReport, HubConfiguration, Message};

/// Work the runtime must do after a transition, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum HubEffect {
    /// Build queues and codecs for a new configuration, replacing any old one.
    InstallConfig(HubConfiguration),
    StartAdapters,
    /// Stop capture; publishers drain what is queued.
    StopAdapters,
    /// Drop adapters, queues and configuration.
    TearDown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutcome {
    pub state: HubState,
    /// CONTROL_ACK on success, ERROR otherwise.
    pub reply: Message,
    pub effects: Vec<HubEffect>,
}

/// Spec checks a hub applies to CONFIGURE before accepting it.
pub fn configuration_violations(hub_id: &str, cfg: &HubConfiguration) -> Vec<Violation> {
    let mut out = validate_streams(&cfg.streams, None);
    out.extend(validate_codecs(&cfg.streams, &cfg.external_codecs));
    for s in &cfg.streams {
        if s.descriptor.source_hub != hub_id {
            out.push(Violation::new(
                ViolationCode::UnknownHub,
                format!("streams[id={}].source_hub", s.descriptor.stream_id),
                format!("stream belongs to {:?}, not {hub_id:?}", s.descriptor.source_hub),
            ));
        }
    }
    if cfg.queue_capacity == 0 {
        out.push(Violation::new(ViolationCode::BadQueueCapacity, "queue_capacity".into(), "must be >= 1".into()));
    }
    if cfg.metrics_interval_ms == 0 {
        out.push(Violation::new(ViolationCode::BadMetricsInterval, "metrics_interval_ms".into(), "must be >= 1".into()));
    }
    out
}

pub fn handle_control(state: HubState, hub_id: &str, req: &ControlRequest) -> ControlOutcome {
    use HubState::*;
    let ok = |state: HubState, effects: Vec<HubEffect>| ControlOutcome {
        state,
        reply: Message::ControlAck(ControlAck { id: req.id, hub_id: hub_id.to_string(), state }),
        effects,
    };
    let fail = |code: ErrorCode, message: String| ControlOutcome {
        state,
        reply: Message::Error(ErrorReport { id: Some(req.id), code, message }),
        effects: Vec::new(),
    };
    match (&req.command, state) {
        (ControlCommand::Configure(cfg), Idle | Ready) => {
            let violations = configuration_violations(hub_id, cfg);
            if !violations.is_empty() {
                let msg = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                return fail(ErrorCode::BadSpec, msg);
            }
            let mut effects = Vec::new();
            if state == Ready {
                effects.push(HubEffect::TearDown);
            }
            effects.push(HubEffect::InstallConfig(cfg.clone()));
            ok(Ready, effects)
        }
        (ControlCommand::Start, Ready) => ok(Streaming, vec![HubEffect::StartAdapters]),
        (ControlCommand::Stop, Streaming) => ok(Ready, vec![HubEffect::StopAdapters]),
        (ControlCommand::Reset, Idle) => ok(Idle, vec![]),
        (ControlCommand::Reset, Ready) => ok(Idle, vec![HubEffect::TearDown]),
        (ControlCommand::Reset, Streaming) => ok(Idle, vec![HubEffect::StopAdapters, HubEffect::TearDown]),
        (ControlCommand::Status, s) => ok(s, vec![]),
        (cmd, s) => fail(ErrorCode::BadTransition, format!("{} not allowed in {}", cmd.name(), format!("{s:?}").to_uppercase())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdev::AdapterSpec;
    use crate::types::{AdapterConfig, AdapterType, StreamConfig};

    fn lab_config(hub: &str) -> HubConfiguration {
        let mut streams = Vec::new();
        for (t, id) in [(AdapterType::SimUs, 1), (AdapterType::SimPose, 2), (AdapterType::SimRgbd, 3)] {
            for d in AdapterSpec::with_defaults(t, 7, hub, id).descriptors {
                streams.push(StreamConfig {
                    descriptor: d,
                    adapter: AdapterConfig { adapter_type: t, seed: 7, fps: None, jitter_ppm: 0, device: None },
                    codec_id: 0,
                });
            }
        }
        HubConfiguration {
            session_name: "s".into(),
            streams,
            queue_capacity: 256,
            metrics_interval_ms: 500,
            external_codecs: vec![],
        }
    }

    fn cmd(name: &str) -> ControlCommand {
        match name {
            "CONFIGURE" => ControlCommand::Configure(lab_config("hub-a")),
            "START" => ControlCommand::Start,
            "STOP" => ControlCommand::Stop,
            "RESET" => ControlCommand::Reset,
            "STATUS" => ControlCommand::Status,
            _ => unreachable!(),
        }
    }

    #[test]
    fn exhaustive_table() {
        use HubState::*;
        // (state, command) -> Some(next state) when accepted
        let table: &[(HubState, &str, Option<HubState>)] = &[
            (Idle, "CONFIGURE", Some(Ready)),
            (Idle, "START", None),
            (Idle, "STOP", None),
            (Idle, "RESET", Some(Idle)),
            (Idle, "STATUS", Some(Idle)),
            (Ready, "CONFIGURE", Some(Ready)),
            (Ready, "START", Some(Streaming)),
            (Ready, "STOP", None),
            (Ready, "RESET", Some(Idle)),
            (Ready, "STATUS", Some(Ready)),
            (Streaming, "CONFIGURE", None),
            (Streaming, "START", None),
            (Streaming, "STOP", Some(Ready)),
            (Streaming, "RESET", Some(Idle)),
            (Streaming, "STATUS", Some(Streaming)),
        ];
        assert_eq!(table.len(), HubState::ALL.len() * 5);
        for &(state, name, want) in table {
            let req = ControlRequest { id: 9, command: cmd(name) };
            let out = handle_control(state, "hub-a", &req);
            match want {
                Some(next) => {
                    assert_eq!(out.state, next, "{state:?} + {name}");
                    assert_eq!(
                        out.reply,
                        Message::ControlAck(ControlAck { id: 9, hub_id: "hub-a".into(), state: next })
                    );
                }
                None => {
                    assert_eq!(out.state, state, "{state:?} + {name}");
                    assert!(out.effects.is_empty());
                    match out.reply {
                        Message::Error(e) => {
                            assert_eq!(e.code, ErrorCode::BadTransition, "{state:?} + {name}");
                            assert_eq!(e.id, Some(9));
                        }
                        other => panic!("{state:?} + {name}: {other:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn effects() {
        use HubState::*;
        let run = |s, c: &str| handle_control(s, "hub-a", &ControlRequest { id: 1, command: cmd(c) }).effects;
        assert!(matches!(run(Idle, "CONFIGURE").as_slice(), [HubEffect::InstallConfig(c)] if c.streams.len() == 4));
        assert!(matches!(run(Ready, "CONFIGURE").as_slice(), [HubEffect::TearDown, HubEffect::InstallConfig(_)]));
        assert_eq!(run(Ready, "START"), vec![HubEffect::StartAdapters]);
        assert_eq!(run(Streaming, "STOP"), vec![HubEffect::StopAdapters]);
        assert_eq!(run(Streaming, "RESET"), vec![HubEffect::StopAdapters, HubEffect::TearDown]);
        assert_eq!(run(Ready, "RESET"), vec![HubEffect::TearDown]);
        assert_eq!(run(Idle, "RESET"), vec![]);
        assert_eq!(run(Streaming, "STATUS"), vec![]);
    }

    #[test]
    fn bad_spec_rejected() {
        let mut cfg = lab_config("hub-a");
        cfg.streams[1].descriptor.stream_id = 1;
        let out = handle_control(HubState::Idle, "hub-a", &ControlRequest { id: 2, command: ControlCommand::Configure(cfg) });
        assert_eq!(out.state, HubState::Idle);
        assert!(matches!(out.reply, Message::Error(ErrorReport { code: ErrorCode::BadSpec, .. })));

        let out = handle_control(
            HubState::Idle,
            "hub-b",
            &ControlRequest { id: 3, command: ControlCommand::Configure(lab_config("hub-a")) },
        );
        assert!(matches!(out.reply, Message::Error(ErrorReport { code: ErrorCode::BadSpec, .. })));
    }
}
