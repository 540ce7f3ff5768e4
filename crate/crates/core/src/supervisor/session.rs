//! Session lifecycle as a pure transition function.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::types::SessionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Idle,
    Configured,
    Recording,
    Finalizing,
    Complete,
    Error,
}

impl SessionState {
    pub const ALL: [SessionState; 6] = [
        SessionState::Idle,
        SessionState::Configured,
        SessionState::Recording,
        SessionState::Finalizing,
        SessionState::Complete,
        SessionState::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Idle => "IDLE",
            SessionState::Configured => "CONFIGURED",
            SessionState::Recording => "RECORDING",
            SessionState::Finalizing => "FINALIZING",
            SessionState::Complete => "COMPLETE",
            SessionState::Error => "ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    /// A validated configuration.
    Apply(SessionConfig),
    /// Hubs currently connected and READY with the active configuration.
    Start { ready_hubs: BTreeSet<String> },
    Stop,
    HubLost(String),
    HubRecovered(String),
    WriteFailed(String),
    Finalized,
}

impl SessionEvent {
    pub fn name(&self) -> &'static str {
        match self {
            SessionEvent::Apply(_) => "apply",
            SessionEvent::Start { .. } => "start",
            SessionEvent::Stop => "stop",
            SessionEvent::HubLost(_) => "hub_lost",
            SessionEvent::HubRecovered(_) => "hub_recovered",
            SessionEvent::WriteFailed(_) => "write_failed",
            SessionEvent::Finalized => "finalized",
        }
    }
}

/// Side effects the runtime carries out, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionEffect {
    /// RESET then CONFIGURE every hub the configuration references.
    ConfigureHubs(Vec<String>),
    OpenRecording,
    StartHubs(Vec<String>),
    StopHubs(Vec<String>),
    /// Drain in-flight frames for the grace window, then write the manifest.
    FinalizeRecording,
    /// Close writers without a manifest; the `.partial` marker stays.
    AbortRecording,
    Warn(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub state: SessionState,
    pub config: Option<SessionConfig>,
    pub degraded: bool,
    pub error: Option<String>,
}

impl Default for Session {
    fn default() -> Self {
        Session { state: SessionState::Idle, config: None, degraded: false, error: None }
    }
}

impl Session {
    pub fn state(&self) -> SessionState {
        self.state
    }

    fn hubs(&self) -> Vec<String> {
        self.config.as_ref().map(SessionConfig::active_hubs).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransitionError {
    #[error("BAD_TRANSITION: {event} not allowed in {state}")]
    BadTransition { state: &'static str, event: &'static str },
    #[error("HUBS_NOT_READY: {}", .0.join(", "))]
    HubsNotReady(Vec<String>),
}

impl TransitionError {
    pub fn code(&self) -> &'static str {
        match self {
            TransitionError::BadTransition { .. } => "BAD_TRANSITION",
            TransitionError::HubsNotReady(_) => "HUBS_NOT_READY",
        }
    }
}

pub fn transition(s: &Session, ev: SessionEvent) -> Result<(Session, Vec<SessionEffect>), TransitionError> {
    use SessionState::*;
    let bad = TransitionError::BadTransition { state: s.state().as_str(), event: ev.name() };
    let mut next = s.clone();
    let effects = match (s.state(), ev) {
        (Idle | Configured | Complete | Error, SessionEvent::Apply(cfg)) => {
            next.state = Configured;
            next.degraded = false;
            next.error = None;
            next.config = Some(cfg);
            vec![SessionEffect::ConfigureHubs(next.hubs())]
        }
        (Configured, SessionEvent::Start { ready_hubs }) => {
            let missing: Vec<String> = s.hubs().into_iter().filter(|h| !ready_hubs.contains(h)).collect();
            if !missing.is_empty() {
                return Err(TransitionError::HubsNotReady(missing));
            }
            next.state = Recording;
            vec![SessionEffect::OpenRecording, SessionEffect::StartHubs(s.hubs())]
        }
        (Recording, SessionEvent::Stop) => {
            next.state = Finalizing;
            vec![SessionEffect::StopHubs(s.hubs()), SessionEffect::FinalizeRecording]
        }
        (Recording, SessionEvent::HubLost(hub)) => {
            next.degraded = true;
            vec![SessionEffect::Warn(format!("hub {hub} lost during recording; continuing degraded"))]
        }
        (Recording, SessionEvent::HubRecovered(hub)) => {
            vec![SessionEffect::Warn(format!("hub {hub} reconnected; recording remains flagged degraded"))]
        }
        (Recording, SessionEvent::WriteFailed(msg)) => {
            next.state = Error;
            next.error = Some(msg.clone());
            vec![
                SessionEffect::StopHubs(s.hubs()),
                SessionEffect::AbortRecording,
                SessionEffect::Warn(format!("recording failed: {msg}")),
            ]
        }
        (Finalizing, SessionEvent::WriteFailed(msg)) => {
            next.state = Error;
            next.error = Some(msg.clone());
            vec![SessionEffect::Warn(format!("finalize failed: {msg}"))]
        }
        (Finalizing, SessionEvent::Finalized) => {
            next.state = Complete;
            vec![]
        }
        _ => return Err(bad),
    };
    Ok((next, effects))
}
