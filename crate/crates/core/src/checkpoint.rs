//! Binary checkpoint files.
//!
//! Layout:
//!
//! ```text
//! t5lab-checkpoint <version>\n
//! <u64 LE: header length>
//! <JSON header: config, step, tensor table, optimizer info, meta, payload sha256>
//! <payload: f64 or f32 LE values of every tensor in table order>
//! ```
//!
//! The header labels the stored precision. At `F64` a save/load round trip
//! reproduces training state bit for bit; `F32` halves the file and is
//! bit-exact at the stored precision. Loading rejects unknown versions and
//! payloads whose SHA-256 does not match the header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;
use crate::training::{Adam, AdamHyper};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "t5lab-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint payload checksum mismatch (header {expected}, computed {found})")]
    Checksum { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerInfo {
    step: u64,
    hyper: AdamHyper,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    precision: Precision,
    step: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerInfo>,
    meta: BTreeMap<String, String>,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<Adam>,
    pub precision: Precision,
    /// Free-form provenance (vocabulary digest, run id, ...).
    pub meta: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

impl Checkpoint {
    pub fn new(params: ModelParams, optimizer: Option<Adam>) -> Self {
        Self {
            params,
            optimizer,
            precision: Precision::F64,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_precision(self, precision: Precision) -> Self {
        Self { precision, ..self }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.as_ref().map_or(0, |o| o.step)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let precision = self.precision;
        let mut push = |name: String, t: &Tensor| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: payload.len() / precision.width(),
                len: t.numel(),
            });
            for &v in t.data() {
                match precision {
                    Precision::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        };
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for (n, t) in self.params.iter() {
            push(n.to_string(), t);
        }
        if let Some(opt) = &self.optimizer {
            for (i, n) in names.iter().enumerate() {
                push(format!("adam.m/{n}"), &opt.m[i]);
                push(format!("adam.v/{n}"), &opt.v[i]);
            }
        }
        let header = Header {
            config: self.params.config().clone(),
            precision,
            step: self.step(),
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerInfo {
                step: o.step,
                hyper: o.hyper,
            }),
            meta: self.meta.clone(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = format!("{MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| fmt("missing magic line"))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| fmt("magic line is not UTF-8"))?;
        let version = line
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| fmt("not a checkpoint file"))?
            .parse::<u32>()
            .map_err(|_| fmt("bad version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let rest = &bytes[nl + 1..];
        if rest.len() < 8 {
            return Err(fmt("truncated header length"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let body = &rest[8..];
        if body.len() < hlen {
            return Err(fmt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| fmt(&e.to_string()))?;
        let payload = &body[hlen..];
        let found = hex(&Sha256::digest(payload));
        if found != header.payload_sha256 {
            return Err(CheckpointError::Checksum {
                expected: header.payload_sha256,
                found,
            });
        }
        let width = header.precision.width();
        if !payload.len().is_multiple_of(width) {
            return Err(fmt("payload length is not a multiple of the value width"));
        }
        let values: Vec<f64> = match header.precision {
            Precision::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let mut named: HashMap<String, Tensor> = HashMap::new();
        for e in &header.tensors {
            let data = values
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| fmt(&format!("tensor {} overruns the payload", e.name)))?;
            let t = Tensor::new(e.shape.clone(), data.to_vec()).map_err(|err| fmt(&err.to_string()))?;
            named.insert(e.name.clone(), t);
        }
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        named.retain(|k, t| {
            if let Some(n) = k.strip_prefix("adam.m/") {
                m.insert(n.to_string(), t.clone());
                false
            } else if let Some(n) = k.strip_prefix("adam.v/") {
                v.insert(n.to_string(), t.clone());
                false
            } else {
                true
            }
        });
        let params = ModelParams::from_named(header.config, named)?;
        let optimizer = match header.optimizer {
            None => None,
            Some(info) => {
                let take = |map: &mut HashMap<String, Tensor>, n: &str| {
                    map.remove(n).ok_or_else(|| fmt(&format!("missing optimizer moment for {n}")))
                };
                let mut ms = Vec::new();
                let mut vs = Vec::new();
                for (n, _) in params.iter() {
                    ms.push(take(&mut m, n)?);
                    vs.push(take(&mut v, n)?);
                }
                Some(Adam {
                    hyper: info.hyper,
                    step: info.step,
                    m: ms,
                    v: vs,
                })
            }
        };
        Ok(Self {
            params,
            optimizer,
            precision: header.precision,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small() -> ModelParams {
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.vocab_size = 50;
        c.d_model = 8;
        c.d_ff = 8;
        c.n_heads = 2;
        init_params(&c, 1).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = small();
        let mut opt = Adam::new(&p);
        opt.step = 7;
        opt.m[0].data_mut()[0] = 0.125;
        let mut ck = Checkpoint::new(p, Some(opt));
        ck.meta.insert("vocab_sha256".into(), "abc".into());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn f32_round_trip_is_exact_at_stored_precision() {
        let ck = Checkpoint::new(small(), None).with_precision(Precision::F32);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.precision, Precision::F32);
        assert_eq!(back.to_bytes(), bytes);
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let mut bytes = Checkpoint::new(small(), None).to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let bytes = Checkpoint::new(small(), None).to_bytes();
        let mut s = b"t5lab-checkpoint 2".to_vec();
        s.extend_from_slice(&bytes[b"t5lab-checkpoint 1".len()..]);
        assert!(matches!(
            Checkpoint::from_bytes(&s),
            Err(CheckpointError::Version { found: 2, expected: 1 })
        ));
    }
}
