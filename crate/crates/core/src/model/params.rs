use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::tensor::Tensor;

/// Every weight tensor in canonical order. Shapes depend on the config only.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut out = vec![
        ("shared.embedding".to_string(), vec![c.vocab_size, d]),
        ("encoder.rel_bias".to_string(), vec![c.rel_pos_buckets, c.n_heads]),
    ];
    let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{prefix}.{m}"), vec![d, d]));
        }
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.ffn.wi"), vec![d, f]));
        out.push((format!("{prefix}.ffn.wo"), vec![f, d]));
        out.push((format!("{prefix}.ffn_norm"), vec![d]));
    };
    for i in 0..c.n_enc_layers {
        let p = format!("encoder.{i}");
        attn(&mut out, &format!("{p}.self_attn"));
        out.push((format!("{p}.self_attn_norm"), vec![d]));
        ffn(&mut out, &p);
    }
    out.push(("encoder.final_norm".into(), vec![d]));
    out.push(("decoder.rel_bias".into(), vec![c.rel_pos_buckets, c.n_heads]));
    for i in 0..c.n_dec_layers {
        let p = format!("decoder.{i}");
        attn(&mut out, &format!("{p}.self_attn"));
        out.push((format!("{p}.self_attn_norm"), vec![d]));
        attn(&mut out, &format!("{p}.cross_attn"));
        out.push((format!("{p}.cross_attn_norm"), vec![d]));
        ffn(&mut out, &p);
    }
    out.push(("decoder.final_norm".into(), vec![d]));
    out
}

/// Closed-form parameter total.
pub fn count_params(c: &ModelConfig) -> u64 {
    let (v, d, f) = (c.vocab_size as u64, c.d_model as u64, c.d_ff as u64);
    let bias = (c.rel_pos_buckets * c.n_heads) as u64;
    let enc_layer = 4 * d * d + 2 * d * f + 2 * d;
    let dec_layer = 8 * d * d + 2 * d * f + 3 * d;
    v * d + c.n_enc_layers as u64 * enc_layer + d + bias + c.n_dec_layers as u64 * dec_layer + d + bias
}

/// Named weights for one config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<(String, Arc<Tensor>)>,
    index: HashMap<String, usize>,
}

fn is_norm(name: &str) -> bool {
    name.ends_with("_norm")
}

/// Weights drawn from N(0, 1/fan_in), where fan_in is the input width of a
/// projection and `d_model` for the embedding and bias tables. Norm scales
/// start at 1. Deterministic per `(config, seed)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = param_shapes(config)
        .into_iter()
        .map(|(name, shape)| {
            let t = if is_norm(&name) {
                Tensor::ones(&shape)
            } else {
                let fan_in = if name == "shared.embedding" || name.ends_with("rel_bias") {
                    config.d_model
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            (name, Arc::new(t))
        })
        .collect();
    Ok(ModelParams::from_parts(config.clone(), tensors))
}

impl ModelParams {
    fn from_parts(config: ModelConfig, tensors: Vec<(String, Arc<Tensor>)>) -> Self {
        let index = tensors.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self { config, tensors, index }
    }

    /// Builds params from named tensors, checking names and shapes against
    /// the config. The result is in canonical order.
    pub fn from_named(config: ModelConfig, mut named: HashMap<String, Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in param_shapes(&config) {
            let t = named.remove(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: shape,
                });
            }
            tensors.push((name, Arc::new(t)));
        }
        if let Some(extra) = named.keys().min() {
            return Err(ModelError::Config(format!("unexpected parameter {extra:?}")));
        }
        Ok(Self::from_parts(config, tensors))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.tensors[i].1))
    }

    /// Mutable access by canonical position.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i].1)
    }

    pub fn numel(&self) -> u64 {
        self.tensors.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }
}
