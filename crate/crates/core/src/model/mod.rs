//! T5-style encoder-decoder Transformer.
//!
//! Blocks are pre-normalized with RMS scaling, attention carries a learned
//! relative position bias computed in the first layer of each stack and
//! shared by the remaining layers, the feed-forward block is `relu(x Wi) Wo`,
//! and the token embedding doubles as the output projection (logits are
//! scaled by `1/sqrt(d_model)`).
//!
//! The forward pass is written once over [`Backend`](crate::tensor::Backend)
//! and runs on a [`Tape`](crate::tensor::Tape) for training or on
//! [`Eval`](crate::tensor::Eval) for inference. [`InferenceModel`] adds
//! incremental decoding with cached keys and values.

mod forward;
mod incremental;
mod params;

pub use forward::{encode, forward, Dropout, Weights};
pub use incremental::{DecoderState, EncoderMemory, InferenceModel};
pub use params::{count_params, init_params, param_shapes, ModelParams};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

pub const NORM_EPS: f64 = 1e-6;
/// Additive score for masked attention entries.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("{which} sequence of length {len} exceeds the maximum {max}")]
    Length { which: &'static str, len: usize, max: usize },
    #[error("{which} sequence {index} is empty")]
    EmptySequence { which: &'static str, index: usize },
    #[error("token id {id} out of range for vocabulary size {vocab}")]
    TokenRange { id: u32, vocab: usize },
    #[error("batch size mismatch: {enc} encoder vs {dec} decoder sequences")]
    BatchMismatch { enc: usize, dec: usize },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub rel_pos_buckets: usize,
    pub rel_pos_max_distance: usize,
    pub max_input_len: usize,
    pub max_target_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

pub const PRESET_NAMES: [&str; 4] = ["tiny", "base-256", "base-1024", "large-1024"];

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("rel_pos_max_distance", self.rel_pos_max_distance),
            ("max_input_len", self.max_input_len),
            ("max_target_len", self.max_target_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.rel_pos_buckets < 2 {
            return Err(ModelError::Config("rel_pos_buckets must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn from_toml_str(src: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(src).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let src = std::fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&src)
    }

    /// One of [`PRESET_NAMES`].
    pub fn preset(name: &str) -> Result<Self, ModelError> {
        let src = match name {
            "tiny" => include_str!("../../presets/tiny.toml"),
            "base-256" => include_str!("../../presets/base-256.toml"),
            "base-1024" => include_str!("../../presets/base-1024.toml"),
            "large-1024" => include_str!("../../presets/large-1024.toml"),
            _ => return Err(ModelError::UnknownPreset(name.to_string())),
        };
        Self::from_toml_str(src)
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ModelError> {
        if PRESET_NAMES.contains(&name_or_path) {
            Self::preset(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }
}

/// Maps a signed offset `key_pos - query_pos` to a bias bucket.
///
/// In bidirectional mode the lower half of the buckets holds keys at or
/// before the query and the upper half keys after it. In each half, the first
/// `half/2` buckets are exact offsets and the rest grow logarithmically up to
/// `max_distance`, beyond which everything shares the last bucket. In causal
/// mode future offsets all map to bucket 0.
pub fn relative_bucket(distance: i64, buckets: usize, max_distance: usize, bidirectional: bool) -> usize {
    let mut n_buckets = buckets;
    let mut base = 0;
    let n = if bidirectional {
        n_buckets /= 2;
        if distance > 0 {
            base = n_buckets;
        }
        distance.unsigned_abs() as usize
    } else {
        (-distance).max(0) as usize
    };
    let max_exact = n_buckets / 2;
    if n < max_exact {
        return base + n;
    }
    if n_buckets <= 1 || max_distance <= max_exact || max_exact == 0 {
        return base + n_buckets.saturating_sub(1);
    }
    let log_ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    // the epsilon keeps offsets that sit exactly on a bucket edge from
    // rounding down
    let large = max_exact + (log_ratio * (n_buckets - max_exact) as f64 + 1e-9) as usize;
    base + large.min(n_buckets - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in PRESET_NAMES {
            let c = ModelConfig::preset(name).unwrap();
            assert!([256, 1024].contains(&c.max_input_len), "{name}");
            assert!([256, 1024].contains(&c.max_target_len), "{name}");
        }
        assert!(matches!(ModelConfig::preset("huge"), Err(ModelError::UnknownPreset(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ModelConfig::preset("tiny").unwrap();
        assert_eq!(ModelConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_head_split() {
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.n_heads = 5;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn bucket_basics() {
        assert_eq!(relative_bucket(0, 32, 128, true), 0);
        assert_eq!(relative_bucket(0, 32, 128, false), 0);
        assert_eq!(relative_bucket(3, 32, 128, false), 0);
        assert_eq!(relative_bucket(-3, 32, 128, false), 3);
        assert_eq!(relative_bucket(1, 32, 128, true), 17);
        assert_eq!(relative_bucket(-1, 32, 128, true), 1);
        let far: Vec<usize> = (128..300).map(|d| relative_bucket(-d, 32, 128, true)).collect();
        assert!(far.iter().all(|&b| b == 15));
        assert_eq!(relative_bucket(5, 2, 16, true), 1);
    }
}
