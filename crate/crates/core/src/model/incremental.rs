use std::sync::Arc;

use super::forward::{attend, bucket_ids, ffn, merge_heads, pad_batch, split_heads};
use super::{encode, forward, ModelConfig, ModelError, ModelParams, Weights, NORM_EPS};
use crate::tensor::{Backend, Eval, Tensor};

type T = Arc<Tensor>;

/// Inference wrapper over [`Eval`] with cached incremental decoding.
pub struct InferenceModel {
    w: Weights<T>,
    emb_t: T,
}

/// Encoder output for one sequence plus the per-layer cross-attention keys
/// (transposed, `[H, dh, Te]`) and values (`[H, Te, dh]`).
#[derive(Clone)]
pub struct EncoderMemory {
    pub states: T,
    cross: Vec<(T, T)>,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder self-attention cache. Cloning is cheap: tensors are shared.
#[derive(Clone)]
pub struct DecoderState {
    pos: usize,
    self_kv: Vec<Option<(T, T)>>,
}

impl DecoderState {
    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

impl InferenceModel {
    pub fn new(params: &ModelParams) -> Self {
        let w = Weights::bind(&Eval, params);
        let emb_t = Arc::new(w.embedding.permute(&[1, 0]).expect("2-d embedding"));
        Self { w, emb_t }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.w.config
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.w
    }

    /// Full, uncached logits `[B, T_dec, V]`.
    pub fn logits(&self, enc: &[Vec<u32>], dec: &[Vec<u32>]) -> Result<Tensor, ModelError> {
        Ok(Arc::unwrap_or_clone(forward(&Eval, &self.w, enc, dec, None)?))
    }

    /// Encoder final states `[B, T, d]` and unpadded lengths.
    pub fn encoder_states(&self, enc: &[Vec<u32>]) -> Result<(Tensor, Vec<usize>), ModelError> {
        let (s, lens) = encode(&Eval, &self.w, enc, None)?;
        Ok((Arc::unwrap_or_clone(s), lens))
    }

    pub fn encode(&self, ids: &[u32]) -> Result<EncoderMemory, ModelError> {
        let b = Eval;
        let h = self.w.config.n_heads;
        let (states, _) = encode(&b, &self.w, &[ids.to_vec()], None)?;
        let mut cross = Vec::with_capacity(self.w.decoder.len());
        for layer in &self.w.decoder {
            let k = split_heads(&b, &b.matmul(&states, &layer.cross_attn.k)?, h)?;
            let v = split_heads(&b, &b.matmul(&states, &layer.cross_attn.v)?, h)?;
            cross.push((b.permute(&k, &[0, 2, 1])?, v));
        }
        Ok(EncoderMemory { states, cross })
    }

    pub fn start(&self) -> DecoderState {
        DecoderState {
            pos: 0,
            self_kv: vec![None; self.w.decoder.len()],
        }
    }

    /// Feeds one decoder token and returns the logits for the next position.
    pub fn step(&self, mem: &EncoderMemory, state: &mut DecoderState, token: u32) -> Result<Vec<f64>, ModelError> {
        let b = Eval;
        let c = &self.w.config;
        let (h, dh, t) = (c.n_heads, c.d_head(), state.pos);
        if t >= c.max_target_len {
            return Err(ModelError::Length {
                which: "decoder",
                len: t + 1,
                max: c.max_target_len,
            });
        }
        let ids = pad_batch(&[vec![token]], "decoder", c.max_target_len, c.vocab_size)?.ids;
        let mut x = b.gather(&self.w.embedding, &ids, &[1, 1])?;
        let bias = {
            let ids = bucket_ids(c, 1, t + 1, t, false);
            let g = b.gather(&self.w.dec_rel_bias, &ids, &[1, t + 1])?;
            b.permute(&g, &[2, 0, 1])?
        };
        for (li, (layer, cache)) in self.w.decoder.iter().zip(state.self_kv.iter_mut()).enumerate() {
            let n = b.rms_norm(&x, &layer.self_attn_norm, NORM_EPS)?;
            let a = &layer.self_attn;
            let q = split_heads(&b, &b.matmul(&n, &a.q)?, h)?;
            let k = split_heads(&b, &b.matmul(&n, &a.k)?, h)?;
            let v = split_heads(&b, &b.matmul(&n, &a.v)?, h)?;
            let kt = b.permute(&k, &[0, 2, 1])?;
            let (kt, v) = match cache.take() {
                Some((pk, pv)) => (b.concat(&pk, &kt, 2)?, b.concat(&pv, &v, 1)?),
                None => (kt, v),
            };
            let ctx = attend(&b, &q, &kt, &v, Some(&bias), dh)?;
            *cache = Some((kt, v));
            x = b.add(&x, &b.matmul(&merge_heads(&b, &ctx, h)?, &a.o)?)?;

            let n = b.rms_norm(&x, &layer.cross_attn_norm, NORM_EPS)?;
            let q = split_heads(&b, &b.matmul(&n, &layer.cross_attn.q)?, h)?;
            let (ckt, cv) = &mem.cross[li];
            let ctx = attend(&b, &q, ckt, cv, None, dh)?;
            x = b.add(&x, &b.matmul(&merge_heads(&b, &ctx, h)?, &layer.cross_attn.o)?)?;

            let n = b.rms_norm(&x, &layer.ffn_norm, NORM_EPS)?;
            x = b.add(&x, &ffn(&b, &n, &layer.wi, &layer.wo)?)?;
        }
        state.pos += 1;
        let out = b.rms_norm(&x, &self.w.dec_final_norm, NORM_EPS)?;
        let logits = b.scale(&b.matmul(&out, &self.emb_t)?, 1.0 / (c.d_model as f64).sqrt());
        Ok(Arc::unwrap_or_clone(logits).into_data())
    }
}
