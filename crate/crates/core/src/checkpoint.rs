//! Versioned CBOR encodings for checkpoints and client payloads.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::elbo::OptState;
use crate::error::{Error, Result};
use crate::federation::{ClientPayload, RoundLog, WarmState};
use crate::prior::GlobalPrior;

pub const CHECKPOINT_FORMAT: &str = "fedmogp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.cbor";

/// Per-client state that persists between rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientCheckpoint {
    pub client_id: usize,
    /// Personalized values of the parameter groups the server leaves local.
    pub personal: GlobalPrior,
    pub opt: OptState,
    pub warm: Option<WarmState>,
}

/// Everything needed to continue a federation run after `rounds_completed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub rounds_completed: usize,
    pub prior: GlobalPrior,
    pub opt: OptState,
    pub clients: Vec<ClientCheckpoint>,
    pub logs: Vec<RoundLog>,
}

impl Checkpoint {
    pub fn new(
        seed: u64,
        rounds_completed: usize,
        prior: GlobalPrior,
        opt: OptState,
        clients: Vec<ClientCheckpoint>,
        logs: Vec<RoundLog>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            rounds_completed,
            prior,
            opt,
            clients,
            logs,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        to_cbor(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let cp: Checkpoint = from_cbor(bytes, "checkpoint")?;
        if cp.format != CHECKPOINT_FORMAT {
            return Err(Error::Encoding(format!("not a checkpoint (format tag `{}`)", cp.format)));
        }
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Encoding(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        if cp.logs.len() != cp.rounds_completed {
            return Err(Error::Encoding("checkpoint round count does not match its logs".into()));
        }
        let ids: Vec<usize> = cp.clients.iter().map(|c| c.client_id).collect();
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Encoding("checkpoint clients are not sorted and unique".into()));
        }
        Ok(cp)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("cbor.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::decode(&bytes).map_err(|e| e.context(format!("decoding {}", path.display())))
    }
}

pub fn encode_payload(p: &ClientPayload) -> Result<Vec<u8>> {
    to_cbor(p)
}

pub fn decode_payload(bytes: &[u8]) -> Result<ClientPayload> {
    let p: ClientPayload = from_cbor(bytes, "client payload")?;
    p.validate()?;
    Ok(p)
}

fn to_cbor<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ciborium::into_writer(value, &mut buf).map_err(|e| Error::Encoding(e.to_string()))?;
    Ok(buf)
}

fn from_cbor<T: DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T> {
    ciborium::from_reader(bytes).map_err(|e| Error::Encoding(format!("invalid {what}: {e}")))
}
