//! Frame payload codecs: identity, the built-in DRLE codec and external
//! codecs implemented as separate processes.

pub mod drle;
mod external;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use external::ExternalCodec;

pub const RAW: u8 = 0;
pub const DRLE: u8 = 1;
/// First id available to external codecs.
pub const EXTERNAL_MIN: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("UNKNOWN_CODEC: {0}")]
    UnknownCodec(u8),
    #[error("ID_TAKEN: codec id {0} is already registered")]
    IdTaken(u8),
    #[error("RESERVED_ID: codec id {0} is outside the external range 128..=255")]
    ReservedId(u8),
    #[error("CORRUPT: {0}")]
    Corrupt(String),
    #[error("ENCODE_FAILED: {0}")]
    EncodeFailed(String),
    #[error("DECODE_FAILED: {0}")]
    DecodeFailed(String),
}

impl CodecError {
    pub fn code(&self) -> &'static str {
        match self {
            CodecError::UnknownCodec(_) => "UNKNOWN_CODEC",
            CodecError::IdTaken(_) => "ID_TAKEN",
            CodecError::ReservedId(_) => "RESERVED_ID",
            CodecError::Corrupt(_) => "CORRUPT",
            CodecError::EncodeFailed(_) => "ENCODE_FAILED",
            CodecError::DecodeFailed(_) => "DECODE_FAILED",
        }
    }
}

/// External codec declaration as it appears in session configs and manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalCodecSpec {
    pub codec_id: u8,
    /// Command line; arguments are split on whitespace.
    pub encoder: String,
    pub decoder: String,
    #[serde(default)]
    pub lossy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecInfo {
    pub codec_id: u8,
    pub name: String,
    pub lossy: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct CodecRegistry {
    external: BTreeMap<u8, ExternalCodec>,
}

impl CodecRegistry {
    pub fn new() -> Self {
        CodecRegistry::default()
    }

    pub fn with_external(specs: &[ExternalCodecSpec]) -> Result<Self, CodecError> {
        let mut reg = CodecRegistry::new();
        for spec in specs {
            reg.register_spec(spec)?;
        }
        Ok(reg)
    }

    pub fn is_registered(&self, id: u8) -> bool {
        id == RAW || id == DRLE || self.external.contains_key(&id)
    }

    pub fn register_external(
        &mut self,
        id: u8,
        encoder: Vec<String>,
        decoder: Vec<String>,
        lossy: bool,
    ) -> Result<(), CodecError> {
        if self.is_registered(id) {
            return Err(CodecError::IdTaken(id));
        }
        if id < EXTERNAL_MIN {
            return Err(CodecError::ReservedId(id));
        }
        self.external.insert(id, ExternalCodec::new(encoder, decoder, lossy));
        Ok(())
    }

    pub fn register_spec(&mut self, spec: &ExternalCodecSpec) -> Result<(), CodecError> {
        let split = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        self.register_external(spec.codec_id, split(&spec.encoder), split(&spec.decoder), spec.lossy)
    }

    pub fn info(&self, id: u8) -> Option<CodecInfo> {
        match id {
            RAW => Some(CodecInfo { codec_id: id, name: "RAW".into(), lossy: false, encoder: None, decoder: None }),
            DRLE => Some(CodecInfo { codec_id: id, name: "DRLE".into(), lossy: false, encoder: None, decoder: None }),
            _ => self.external.get(&id).map(|c| CodecInfo {
                codec_id: id,
                name: format!("EXTERNAL_{id}"),
                lossy: c.lossy,
                encoder: Some(c.encoder.join(" ")),
                decoder: Some(c.decoder.join(" ")),
            }),
        }
    }

    pub fn is_lossy(&self, id: u8) -> bool {
        self.external.get(&id).is_some_and(|c| c.lossy)
    }

    /// Appends the encoded payload to `out`.
    pub fn encode_into(&self, id: u8, payload: &[u8], out: &mut Vec<u8>) -> Result<(), CodecError> {
        match id {
            RAW => out.extend_from_slice(payload),
            DRLE => drle::encode_into(payload, out),
            _ => {
                let codec = self.external.get(&id).ok_or(CodecError::UnknownCodec(id))?;
                out.extend_from_slice(&codec.encode(payload)?);
            }
        }
        Ok(())
    }

    pub fn encode(&self, id: u8, payload: &[u8]) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::new();
        self.encode_into(id, payload, &mut out)?;
        Ok(out)
    }

    pub fn decode(&self, id: u8, payload: &[u8], expected_len: usize) -> Result<Vec<u8>, CodecError> {
        let out = match id {
            RAW => payload.to_vec(),
            DRLE => return drle::decode(payload, expected_len),
            _ => self.external.get(&id).ok_or(CodecError::UnknownCodec(id))?.decode(payload)?,
        };
        if out.len() != expected_len {
            return Err(CodecError::Corrupt(format!("decoded {} bytes, expected {}", out.len(), expected_len)));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_is_identity() {
        let reg = CodecRegistry::new();
        let data = b"any bytes at all".to_vec();
        assert_eq!(reg.encode(RAW, &data).unwrap(), data);
        assert_eq!(reg.decode(RAW, &data, data.len()).unwrap(), data);
        assert!(matches!(reg.decode(RAW, &data, 3), Err(CodecError::Corrupt(_))));
    }

    #[test]
    fn registration_rules() {
        let mut reg = CodecRegistry::new();
        let cat = || vec!["cat".to_string()];
        assert_eq!(reg.register_external(1, cat(), cat(), false), Err(CodecError::IdTaken(1)));
        assert_eq!(reg.register_external(0, cat(), cat(), false), Err(CodecError::IdTaken(0)));
        assert_eq!(reg.register_external(5, cat(), cat(), false), Err(CodecError::ReservedId(5)));
        reg.register_external(200, cat(), cat(), false).unwrap();
        assert_eq!(reg.register_external(200, cat(), cat(), false), Err(CodecError::IdTaken(200)));
        assert_eq!(reg.decode(201, b"x", 1), Err(CodecError::UnknownCodec(201)));
        assert_eq!(reg.encode(201, b"x"), Err(CodecError::UnknownCodec(201)));
    }

    #[test]
    fn external_identity_matches_raw() {
        let mut reg = CodecRegistry::new();
        reg.register_spec(&ExternalCodecSpec { codec_id: 200, encoder: "cat".into(), decoder: "cat".into(), lossy: false })
            .unwrap();
        let data: Vec<u8> = (0..200_000u32).map(|i| (i * 7 % 251) as u8).collect();
        let enc = reg.encode(200, &data).unwrap();
        assert_eq!(enc, reg.encode(RAW, &data).unwrap());
        assert_eq!(reg.decode(200, &enc, data.len()).unwrap(), data);
        let info = reg.info(200).unwrap();
        assert_eq!(info.encoder.as_deref(), Some("cat"));
        assert!(!reg.is_lossy(200));
    }

    #[test]
    fn external_failure_captures_stderr() {
        let mut reg = CodecRegistry::new();
        reg.register_external(
            130,
            vec!["sh".into(), "-c".into(), "echo boom >&2; exit 3".into()],
            vec!["cat".into()],
            true,
        )
        .unwrap();
        match reg.encode(130, b"abc") {
            Err(CodecError::EncodeFailed(msg)) => assert!(msg.contains("boom"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(reg.is_lossy(130));
    }

    #[test]
    fn missing_executable() {
        let mut reg = CodecRegistry::new();
        reg.register_external(131, vec!["/nonexistent/codec".into()], vec!["cat".into()], false).unwrap();
        assert!(matches!(reg.encode(131, b"abc"), Err(CodecError::EncodeFailed(_))));
    }
}
