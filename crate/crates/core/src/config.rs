//! Run configuration and the parameters both parties must agree on.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ModelConfig;
use crate::paillier::{PublicKey, SUPPORTED_KEY_BITS};
use crate::wire::{self, DecodeError, Reader};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeMode {
    Off,
    On,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunRole {
    Active,
    Passive,
    Local,
}

/// How often workers synchronize through their parameter server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// One push/pull round per mini-batch step.
    Batch,
    /// Workers train a whole epoch locally, then synchronize.
    Epoch,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training features (and labels) of the active party.
    pub active: Option<PathBuf>,
    /// Training features of the passive party.
    pub passive: Option<PathBuf>,
    pub test_active: Option<PathBuf>,
    pub test_passive: Option<PathBuf>,
    /// Pads LIBSVM feature vectors to at least this many columns.
    pub min_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    /// Address the passive party listens on for worker pairs.
    pub peer: String,
    /// When set, the active party serves its parameter server over TCP here.
    pub active_ps: Option<String>,
    /// When set, the passive party serves its parameter server over TCP here.
    pub passive_ps: Option<String>,
}

impl Default for Endpoints {
    fn default() -> Self {
        Self {
            peer: "127.0.0.1:7100".into(),
            active_ps: None,
            passive_ps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub psi: u64,
    pub he: u64,
    pub mask: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            psi: 0x5053_495f_5041_5254,
            he: 0x4845_5f4b_4559,
            mask: 0x4d41_534b,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub role: RunRole,
    pub n_workers: usize,
    pub he: HeMode,
    pub key_bits: u32,
    pub frac_bits: u32,
    pub aggregation: Aggregation,
    /// Stop once the mean loss of an aggregation round falls below this.
    pub stop_loss_below: Option<f64>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub endpoints: Endpoints,
    pub seeds: Seeds,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            role: RunRole::Local,
            n_workers: 1,
            he: HeMode::Off,
            key_bits: crate::paillier::DEFAULT_KEY_BITS,
            frac_bits: crate::paillier::DEFAULT_FRAC_BITS,
            aggregation: Aggregation::Batch,
            stop_loss_below: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            endpoints: Endpoints::default(),
            seeds: Seeds::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_workers == 0 {
            return bad("n_workers must be at least 1".into());
        }
        if self.model.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.model.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.model.lr.is_finite() && self.model.lr >= 0.0) {
            return bad(format!("learning rate {} is not a finite non-negative number", self.model.lr));
        }
        if self.he == HeMode::On && !SUPPORTED_KEY_BITS.contains(&self.key_bits) {
            return bad(format!("key_bits {} not in {:?}", self.key_bits, SUPPORTED_KEY_BITS));
        }
        if !(1..=24).contains(&self.frac_bits) {
            return bad(format!("frac_bits {} outside 1..=24", self.frac_bits));
        }
        if self.model.interactive_out == 0 {
            return bad("interactive_out must be positive".into());
        }
        Ok(())
    }

    /// The subset both parties must hold identically, with the per-party
    /// input widths cleared.
    pub fn negotiated(&self) -> Negotiated {
        Negotiated {
            n_workers: self.n_workers,
            he: self.he,
            key_bits: self.key_bits,
            frac_bits: self.frac_bits,
            aggregation: self.aggregation,
            stop_loss_below: self.stop_loss_below,
            psi_seed: self.seeds.psi,
            model: ModelConfig {
                active_in: 0,
                passive_in: 0,
                ..self.model.clone()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Negotiated {
    pub n_workers: usize,
    pub he: HeMode,
    pub key_bits: u32,
    pub frac_bits: u32,
    pub aggregation: Aggregation,
    pub stop_loss_below: Option<f64>,
    pub psi_seed: u64,
    pub model: ModelConfig,
}

/// HANDSHAKE payload, active → passive.
#[derive(Clone, Debug, PartialEq)]
pub struct Handshake {
    pub active_in: usize,
    pub params: Negotiated,
}

impl Handshake {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        wire::put_u32(&mut buf, self.active_in as u32);
        let text = toml::to_string(&self.params).expect("negotiated parameters serialize");
        wire::put_bytes(&mut buf, text.as_bytes());
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let active_in = r.u32()? as usize;
        let text = std::str::from_utf8(r.bytes()?).map_err(|e| DecodeError::Invalid(e.to_string()))?;
        let params = toml::from_str(text).map_err(|e| DecodeError::Invalid(e.to_string()))?;
        r.finish()?;
        Ok(Self { active_in, params })
    }

    /// Names the first field on which `self` and `local` disagree.
    pub fn mismatch(&self, local: &Negotiated) -> Option<String> {
        let p = &self.params;
        let checks: [(&str, bool); 8] = [
            ("n_workers", p.n_workers == local.n_workers),
            ("he", p.he == local.he),
            ("key_bits", p.he == HeMode::Off || p.key_bits == local.key_bits),
            ("frac_bits", p.frac_bits == local.frac_bits),
            ("aggregation", p.aggregation == local.aggregation),
            ("stop_loss_below", p.stop_loss_below == local.stop_loss_below),
            ("psi seed", p.psi_seed == local.psi_seed),
            ("model", p.model == local.model),
        ];
        checks
            .iter()
            .find(|(_, ok)| !ok)
            .map(|(name, _)| format!("{name} differs between parties"))
    }
}

/// HANDSHAKE_ACK payload, passive → active.
#[derive(Clone, Debug, PartialEq)]
pub enum HandshakeAck {
    Accepted {
        passive_in: usize,
        public_key: Option<PublicKey>,
    },
    Rejected(String),
}

impl HandshakeAck {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        match self {
            HandshakeAck::Accepted {
                passive_in,
                public_key,
            } => {
                wire::put_u8(&mut buf, 0);
                wire::put_u32(&mut buf, *passive_in as u32);
                match public_key {
                    Some(pk) => {
                        wire::put_u8(&mut buf, 1);
                        wire::put_bytes(&mut buf, &pk.to_bytes());
                    }
                    None => wire::put_u8(&mut buf, 0),
                }
            }
            HandshakeAck::Rejected(reason) => {
                wire::put_u8(&mut buf, 1);
                wire::put_bytes(&mut buf, reason.as_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let ack = match r.u8()? {
            0 => {
                let passive_in = r.u32()? as usize;
                let public_key = match r.u8()? {
                    0 => None,
                    _ => Some(PublicKey::from_bytes(r.bytes()?)?),
                };
                HandshakeAck::Accepted {
                    passive_in,
                    public_key,
                }
            }
            _ => HandshakeAck::Rejected(String::from_utf8_lossy(r.bytes()?).into_owned()),
        };
        r.finish()?;
        Ok(ack)
    }
}
