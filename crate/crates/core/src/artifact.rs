//! Versioned binary container for fitted models.
//!
//! Layout: 8-byte magic, format version (u32 LE), payload length (u64 LE),
//! CBOR payload, then the SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Schema, Standardizer};
use crate::error::{Error, Result};
use crate::fit::FittedModel;
use crate::stacking::StackingModel;

pub const MAGIC: [u8; 8] = *b"LATGLMAR";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Model(Box<FittedModel>),
    Stacking(Box<StackingModel>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub payload: Payload,
    pub schema: Option<Schema>,
    pub standardizer: Option<Standardizer>,
    pub config_hash: String,
    /// Writer identification; no timestamps, so equal inputs give equal bytes.
    pub created_by: String,
}

impl ModelArtifact {
    pub fn new(payload: Payload, config_hash: String) -> Self {
        ModelArtifact {
            payload,
            schema: None,
            standardizer: None,
            config_hash,
            created_by: format!("latticeglm {}", env!("CARGO_PKG_VERSION")),
        }
    }

    pub fn model(&self) -> Result<&FittedModel> {
        match &self.payload {
            Payload::Model(m) => Ok(m),
            Payload::Stacking(_) => Err(Error::Config("artifact holds a stacking model".into())),
        }
    }

    pub fn stacking(&self) -> Result<&StackingModel> {
        match &self.payload {
            Payload::Stacking(s) => Ok(s),
            Payload::Model(_) => Err(Error::Config("artifact holds a fitted model".into())),
        }
    }
}

pub fn to_bytes(artifact: &ModelArtifact) -> Result<Vec<u8>> {
    encode_version(artifact, FORMAT_VERSION)
}

fn encode_version(artifact: &ModelArtifact, version: u32) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    ciborium::into_writer(artifact, &mut payload)
        .map_err(|e| Error::NumericalError(format!("cannot encode artifact: {e}")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelArtifact> {
    if bytes.len() < 12 || bytes[..8] != MAGIC {
        return Err(Error::ChecksumError("missing artifact header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::ChecksumError("truncated header".into()));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let expected = HEADER_LEN
        .checked_add(len)
        .and_then(|v| v.checked_add(DIGEST_LEN))
        .ok_or_else(|| Error::ChecksumError("payload length overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::ChecksumError(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let body = &bytes[..HEADER_LEN + len];
    if Sha256::digest(body).as_slice() != &bytes[HEADER_LEN + len..] {
        return Err(Error::ChecksumError("checksum mismatch".into()));
    }
    ciborium::from_reader(&bytes[HEADER_LEN..HEADER_LEN + len])
        .map_err(|e| Error::ChecksumError(format!("undecodable payload: {e}")))
}

pub fn save_model(artifact: &ModelArtifact, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(artifact)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    from_bytes(&fs::read(path)?)
}
