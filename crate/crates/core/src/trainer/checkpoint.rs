//! Single-file checkpoints: an 8-byte little-endian header length, a JSON
//! header, then every array as little-endian `f32` in header order.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{FadVlpModel, ModelConfig, Vocabulary};
use crate::tensor::{AdamConfig, AdamState};
use crate::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint config differs from the requested config: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint payload truncated: header describes {expected} bytes, file has {found}")]
    Truncated { expected: usize, found: usize },
}

/// Where training stopped.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counters {
    pub stage1: u64,
    pub stage2: u64,
    pub finetune: u64,
    /// Fine-tuning tasks applied so far, in order.
    pub tasks: Vec<String>,
}

/// ChaCha8 position, enough to resume the stream exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| CheckpointError::Format(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FadVlpModel<f32>,
    pub vocabulary: Vocabulary,
    pub optimizer: Option<AdamState<f32>>,
    pub rng: Option<RngState>,
    pub counters: Counters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocabulary: Vocabulary,
    counters: Counters,
    rng: Option<RngState>,
    optimizer: Option<OptimizerHeader>,
    /// Parameters, then Adam first moments (`adam.m.{name}`), then second
    /// moments (`adam.v.{name}`).
    arrays: Vec<ArrayEntry>,
    payload_bytes: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            arrays.push(ArrayEntry {
                name,
                shape,
                dtype: "f32".into(),
                offset: payload.len(),
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.model.iter() {
            push(name.to_string(), t.shape().to_vec(), t.data());
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("adam.m", &opt.first), ("adam.v", &opt.second)] {
                for ((name, t), m) in self.model.iter().zip(moments) {
                    push(format!("{prefix}.{name}"), t.shape().to_vec(), m);
                }
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.model.config().clone(),
            vocabulary: self.vocabulary.clone(),
            counters: self.counters.clone(),
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            arrays,
            payload_bytes: payload.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: String| CheckpointError::Format(m);
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| fmt("file shorter than the length prefix".into()))?
            .try_into()
            .unwrap();
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(8..8usize.saturating_add(header_len))
            .ok_or_else(|| fmt(format!("header length {header_len} exceeds the file")))?;
        let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| fmt(e.to_string()))?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(value).map_err(|e| fmt(e.to_string()))?;
        let payload = &bytes[8 + header_len..];
        if payload.len() != header.payload_bytes {
            if payload.len() < header.payload_bytes {
                return Err(CheckpointError::Truncated {
                    expected: header.payload_bytes,
                    found: payload.len(),
                });
            }
            return Err(fmt(format!("{} trailing bytes", payload.len() - header.payload_bytes)));
        }
        let mut named = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            if a.dtype != "f32" {
                return Err(fmt(format!("{}: unsupported dtype {}", a.name, a.dtype)));
            }
            let n: usize = a.shape.iter().product();
            let end = a.offset.checked_add(4 * n).filter(|&e| e <= payload.len());
            let end = end.ok_or_else(|| fmt(format!("{}: array runs past the payload", a.name)))?;
            let data: Vec<f32> = payload[a.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(a.shape.clone(), data).map_err(|e| fmt(e.to_string()))?;
            named.push((a.name.clone(), t));
        }
        let (params, moments): (Vec<_>, Vec<_>) = named.into_iter().partition(|(n, _)| !n.starts_with("adam."));
        let model = FadVlpModel::from_parts(header.config, params).map_err(|e| fmt(e.to_string()))?;
        let optimizer = match header.optimizer {
            None if moments.is_empty() => None,
            None => return Err(fmt("optimizer moments without optimizer settings".into())),
            Some(o) => {
                let lookup: std::collections::HashMap<&str, &Tensor<f32>> =
                    moments.iter().map(|(n, t)| (n.as_str(), t)).collect();
                let mut first = Vec::new();
                let mut second = Vec::new();
                for (name, t) in model.iter() {
                    for (prefix, dst) in [("adam.m", &mut first), ("adam.v", &mut second)] {
                        let m = lookup
                            .get(format!("{prefix}.{name}").as_str())
                            .ok_or_else(|| fmt(format!("missing {prefix}.{name}")))?;
                        if m.shape() != t.shape() {
                            return Err(fmt(format!("{prefix}.{name}: shape mismatch")));
                        }
                        dst.push(m.data().to_vec());
                    }
                }
                if lookup.len() != 2 * model.names().len() {
                    return Err(fmt("optimizer moments for unknown parameters".into()));
                }
                Some(AdamState {
                    config: o.config,
                    step: o.step,
                    first,
                    second,
                })
            }
        };
        Ok(Checkpoint {
            model,
            vocabulary: header.vocabulary,
            optimizer,
            rng: header.rng,
            counters: header.counters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Loads and insists that the stored model config equals `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if ck.model.config() != expected {
            let have = serde_json::to_string(ck.model.config()).unwrap();
            let want = serde_json::to_string(expected).unwrap();
            return Err(CheckpointError::ConfigMismatch(format!("stored {have}, requested {want}")));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn small() -> Checkpoint {
        let config = ModelConfig {
            vocab_size: 12,
            ..ModelConfig::default()
        };
        let model = FadVlpModel::new(config, 3).unwrap();
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.numel()).collect();
        let mut adam = AdamState::new(AdamConfig::default(), &sizes);
        adam.step = 7;
        adam.first[0][0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        Checkpoint {
            model,
            vocabulary: Vocabulary::new(["red".to_string(), "dress".to_string()]),
            optimizer: Some(adam),
            rng: Some(RngState::capture(&rng)),
            counters: Counters {
                stage1: 3,
                ..Counters::default()
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = small();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        a.next_u64();
        assert_eq!(back.rng.unwrap().restore().unwrap().next_u64(), a.next_u64());
    }

    #[test]
    fn damage_is_reported() {
        let bytes = small().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut corrupt = bytes.clone();
        corrupt[8] = b'#';
        assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(CheckpointError::Format(_))));
        let mut bumped = bytes.clone();
        let at = bumped.windows(10).position(|w| w == b"\"version\":").unwrap() + 10;
        bumped[at] = b'9';
        assert!(matches!(
            Checkpoint::from_bytes(&bumped),
            Err(CheckpointError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn config_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = small();
        ck.save(&path).unwrap();
        let mut other = ck.model.config().clone();
        other.width = 32;
        other.conv_widths[3] = 32;
        assert!(matches!(
            Checkpoint::load_expecting(&path, &other),
            Err(CheckpointError::ConfigMismatch(_))
        ));
        assert!(Checkpoint::load_expecting(&path, ck.model.config()).is_ok());
    }
}
