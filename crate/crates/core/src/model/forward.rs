use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{relative_bucket, ModelConfig, ModelError, ModelParams, MASK_VALUE, NORM_EPS};
use crate::tensor::{Backend, Tensor};

pub struct AttnWeights<V> {
    pub q: V,
    pub k: V,
    pub v: V,
    pub o: V,
}

pub struct EncoderLayer<V> {
    pub self_attn: AttnWeights<V>,
    pub self_attn_norm: V,
    pub wi: V,
    pub wo: V,
    pub ffn_norm: V,
}

pub struct DecoderLayer<V> {
    pub self_attn: AttnWeights<V>,
    pub self_attn_norm: V,
    pub cross_attn: AttnWeights<V>,
    pub cross_attn_norm: V,
    pub wi: V,
    pub wo: V,
    pub ffn_norm: V,
}

/// Parameters bound to a backend, in structured form.
pub struct Weights<V> {
    pub config: ModelConfig,
    pub embedding: V,
    pub enc_rel_bias: V,
    pub encoder: Vec<EncoderLayer<V>>,
    pub enc_final_norm: V,
    pub dec_rel_bias: V,
    pub decoder: Vec<DecoderLayer<V>>,
    pub dec_final_norm: V,
    /// Every bound value in canonical parameter order.
    pub all: Vec<V>,
}

impl<V: Clone> Weights<V> {
    pub fn bind<B: Backend<Value = V>>(b: &B, params: &ModelParams) -> Self {
        let all: Vec<V> = params.iter().map(|(_, t)| b.param(t)).collect();
        Self::from_values(params.config(), all)
    }

    /// Structures already bound values given in canonical parameter order
    /// (see [`param_shapes`](super::param_shapes)).
    pub fn from_values(config: &ModelConfig, all: Vec<V>) -> Self {
        let names = super::param_shapes(config);
        assert_eq!(names.len(), all.len(), "one value per parameter");
        let by_name: HashMap<&str, usize> = names.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
        let get = |name: String| all[by_name[name.as_str()]].clone();
        let attn = |p: String| AttnWeights {
            q: get(format!("{p}.q")),
            k: get(format!("{p}.k")),
            v: get(format!("{p}.v")),
            o: get(format!("{p}.o")),
        };
        let c = config.clone();
        let encoder = (0..c.n_enc_layers)
            .map(|i| EncoderLayer {
                self_attn: attn(format!("encoder.{i}.self_attn")),
                self_attn_norm: get(format!("encoder.{i}.self_attn_norm")),
                wi: get(format!("encoder.{i}.ffn.wi")),
                wo: get(format!("encoder.{i}.ffn.wo")),
                ffn_norm: get(format!("encoder.{i}.ffn_norm")),
            })
            .collect();
        let decoder = (0..c.n_dec_layers)
            .map(|i| DecoderLayer {
                self_attn: attn(format!("decoder.{i}.self_attn")),
                self_attn_norm: get(format!("decoder.{i}.self_attn_norm")),
                cross_attn: attn(format!("decoder.{i}.cross_attn")),
                cross_attn_norm: get(format!("decoder.{i}.cross_attn_norm")),
                wi: get(format!("decoder.{i}.ffn.wi")),
                wo: get(format!("decoder.{i}.ffn.wo")),
                ffn_norm: get(format!("decoder.{i}.ffn_norm")),
            })
            .collect();
        Self {
            embedding: get("shared.embedding".into()),
            enc_rel_bias: get("encoder.rel_bias".into()),
            encoder,
            enc_final_norm: get("encoder.final_norm".into()),
            dec_rel_bias: get("decoder.rel_bias".into()),
            decoder,
            dec_final_norm: get("decoder.final_norm".into()),
            config: c,
            all,
        }
    }
}

/// Training-time dropout on embeddings and sublayer outputs.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

fn dropout<B: Backend>(b: &B, x: B::Value, d: &mut Option<&mut Dropout>) -> Result<B::Value, ModelError> {
    let Some(d) = d.as_deref_mut() else { return Ok(x) };
    if d.rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - d.rate);
    let shape = b.shape(&x);
    let mask = Tensor::from_fn(&shape, |_| if d.rng.gen::<f64>() < d.rate { 0.0 } else { keep });
    Ok(b.mul(&x, &b.constant(mask))?)
}

pub(super) struct Padded {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub len: usize,
}

pub(super) fn pad_batch(seqs: &[Vec<u32>], which: &'static str, max: usize, vocab: usize) -> Result<Padded, ModelError> {
    let mut len = 0;
    for (index, s) in seqs.iter().enumerate() {
        if s.is_empty() {
            return Err(ModelError::EmptySequence { which, index });
        }
        if s.len() > max {
            return Err(ModelError::Length { which, len: s.len(), max });
        }
        if let Some(&id) = s.iter().find(|&&id| id as usize >= vocab) {
            return Err(ModelError::TokenRange { id, vocab });
        }
        len = len.max(s.len());
    }
    if seqs.is_empty() {
        return Err(ModelError::EmptySequence { which, index: 0 });
    }
    let mut ids = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        ids.extend(s.iter().map(|&t| t as usize));
        ids.extend(std::iter::repeat_n(0, len - s.len()));
    }
    Ok(Padded {
        ids,
        lens: seqs.iter().map(Vec::len).collect(),
        len,
    })
}

/// `[B, T, d] -> [B*H, T, d_head]`
pub(super) fn split_heads<B: Backend>(b: &B, x: &B::Value, h: usize) -> Result<B::Value, ModelError> {
    let s = b.shape(x);
    let (bs, t, d) = (s[0], s[1], s[2]);
    let x = b.reshape(x, &[bs, t, h, d / h])?;
    let x = b.permute(&x, &[0, 2, 1, 3])?;
    Ok(b.reshape(&x, &[bs * h, t, d / h])?)
}

/// `[B*H, T, d_head] -> [B, T, d]`
pub(super) fn merge_heads<B: Backend>(b: &B, x: &B::Value, h: usize) -> Result<B::Value, ModelError> {
    let s = b.shape(x);
    let (bh, t, dh) = (s[0], s[1], s[2]);
    let x = b.reshape(x, &[bh / h, h, t, dh])?;
    let x = b.permute(&x, &[0, 2, 1, 3])?;
    Ok(b.reshape(&x, &[bh / h, t, h * dh])?)
}

/// Scaled dot-product attention over already projected heads.
/// `q: [BH, Tq, dh]`, `kt: [BH, dh, Tk]`, `v: [BH, Tk, dh]`, `bias: [BH, Tq, Tk]`.
pub(super) fn attend<B: Backend>(
    b: &B,
    q: &B::Value,
    kt: &B::Value,
    v: &B::Value,
    bias: Option<&B::Value>,
    d_head: usize,
) -> Result<B::Value, ModelError> {
    let scores = b.scale(&b.bmm(q, kt)?, 1.0 / (d_head as f64).sqrt());
    let scores = match bias {
        Some(bias) => b.add(&scores, bias)?,
        None => scores,
    };
    let p = b.softmax(&scores, 2)?;
    Ok(b.bmm(&p, v)?)
}

fn attention<B: Backend>(
    b: &B,
    w: &AttnWeights<B::Value>,
    x_q: &B::Value,
    x_kv: &B::Value,
    bias: &B::Value,
    h: usize,
) -> Result<B::Value, ModelError> {
    let d_head = b.shape(x_q)[2] / h;
    let q = split_heads(b, &b.matmul(x_q, &w.q)?, h)?;
    let k = split_heads(b, &b.matmul(x_kv, &w.k)?, h)?;
    let v = split_heads(b, &b.matmul(x_kv, &w.v)?, h)?;
    let kt = b.permute(&k, &[0, 2, 1])?;
    let ctx = attend(b, &q, &kt, &v, Some(bias), d_head)?;
    Ok(b.matmul(&merge_heads(b, &ctx, h)?, &w.o)?)
}

pub(super) fn ffn<B: Backend>(b: &B, x: &B::Value, wi: &B::Value, wo: &B::Value) -> Result<B::Value, ModelError> {
    Ok(b.matmul(&b.relu(&b.matmul(x, wi)?), wo)?)
}

/// Bucket ids for queries at `q_offset..q_offset+tq` against keys `0..tk`.
pub(super) fn bucket_ids(c: &ModelConfig, tq: usize, tk: usize, q_offset: usize, bidirectional: bool) -> Vec<usize> {
    let mut ids = Vec::with_capacity(tq * tk);
    for i in 0..tq {
        for j in 0..tk {
            let dist = j as i64 - (i + q_offset) as i64;
            ids.push(relative_bucket(dist, c.rel_pos_buckets, c.rel_pos_max_distance, bidirectional));
        }
    }
    ids
}

/// `[H, tq, tk]` bias from a `[buckets, H]` table.
pub(super) fn position_bias<B: Backend>(
    b: &B,
    table: &B::Value,
    c: &ModelConfig,
    tq: usize,
    tk: usize,
    q_offset: usize,
    bidirectional: bool,
) -> Result<B::Value, ModelError> {
    let ids = bucket_ids(c, tq, tk, q_offset, bidirectional);
    let g = b.gather(table, &ids, &[tq, tk])?;
    Ok(b.permute(&g, &[2, 0, 1])?)
}

fn mask_tensor(batch: usize, h: usize, tq: usize, tk: usize, masked: impl Fn(usize, usize, usize) -> bool) -> Tensor {
    let mut data = Vec::with_capacity(batch * h * tq * tk);
    for bi in 0..batch {
        for _ in 0..h {
            for i in 0..tq {
                for j in 0..tk {
                    data.push(if masked(bi, i, j) { MASK_VALUE } else { 0.0 });
                }
            }
        }
    }
    Tensor::new(vec![batch * h, tq, tk], data).expect("mask shape")
}

/// Expands an `[H, tq, tk]` bias over the batch and adds a constant mask.
fn batch_bias<B: Backend>(b: &B, bias: Option<&B::Value>, mask: Tensor) -> Result<B::Value, ModelError> {
    let mask = b.constant(mask);
    let Some(bias) = bias else { return Ok(mask) };
    let s = b.shape(&mask);
    let e = b.expand(bias, s[0] / b.shape(bias)[0])?;
    let e = b.reshape(&e, &s)?;
    Ok(b.add(&e, &mask)?)
}

/// Encoder final states `[B, T, d]` (after the final norm) and the
/// unpadded lengths.
pub fn encode<B: Backend>(
    b: &B,
    w: &Weights<B::Value>,
    enc: &[Vec<u32>],
    mut drop: Option<&mut Dropout>,
) -> Result<(B::Value, Vec<usize>), ModelError> {
    let c = &w.config;
    let p = pad_batch(enc, "encoder", c.max_input_len, c.vocab_size)?;
    let (bs, t, h) = (enc.len(), p.len, c.n_heads);
    let mut x = b.gather(&w.embedding, &p.ids, &[bs, t])?;
    x = dropout(b, x, &mut drop)?;
    let pos = position_bias(b, &w.enc_rel_bias, c, t, t, 0, true)?;
    let lens = &p.lens;
    let bias = batch_bias(b, Some(&pos), mask_tensor(bs, h, t, t, |bi, _, j| j >= lens[bi]))?;
    for layer in &w.encoder {
        let n = b.rms_norm(&x, &layer.self_attn_norm, NORM_EPS)?;
        let a = attention(b, &layer.self_attn, &n, &n, &bias, h)?;
        x = b.add(&x, &dropout(b, a, &mut drop)?)?;
        let n = b.rms_norm(&x, &layer.ffn_norm, NORM_EPS)?;
        let f = ffn(b, &n, &layer.wi, &layer.wo)?;
        x = b.add(&x, &dropout(b, f, &mut drop)?)?;
    }
    let out = b.rms_norm(&x, &w.enc_final_norm, NORM_EPS)?;
    Ok((dropout(b, out, &mut drop)?, p.lens))
}

/// Logits `[B, T_dec, V]` for decoder inputs `dec` (already shifted right,
/// starting with the pad id) given encoder inputs `enc`.
pub fn forward<B: Backend>(
    b: &B,
    w: &Weights<B::Value>,
    enc: &[Vec<u32>],
    dec: &[Vec<u32>],
    mut drop: Option<&mut Dropout>,
) -> Result<B::Value, ModelError> {
    if enc.len() != dec.len() {
        return Err(ModelError::BatchMismatch {
            enc: enc.len(),
            dec: dec.len(),
        });
    }
    let c = &w.config;
    let pd = pad_batch(dec, "decoder", c.max_target_len, c.vocab_size)?;
    let (memory, enc_lens) = encode(b, w, enc, drop.as_deref_mut())?;
    let (bs, t, h) = (dec.len(), pd.len, c.n_heads);
    let te = b.shape(&memory)[1];

    let mut x = b.gather(&w.embedding, &pd.ids, &[bs, t])?;
    x = dropout(b, x, &mut drop)?;
    let pos = position_bias(b, &w.dec_rel_bias, c, t, t, 0, false)?;
    let self_bias = batch_bias(b, Some(&pos), mask_tensor(bs, h, t, t, |_, i, j| j > i))?;
    let cross_bias = batch_bias(b, None, mask_tensor(bs, h, t, te, |bi, _, j| j >= enc_lens[bi]))?;
    for layer in &w.decoder {
        let n = b.rms_norm(&x, &layer.self_attn_norm, NORM_EPS)?;
        let a = attention(b, &layer.self_attn, &n, &n, &self_bias, h)?;
        x = b.add(&x, &dropout(b, a, &mut drop)?)?;
        let n = b.rms_norm(&x, &layer.cross_attn_norm, NORM_EPS)?;
        let a = attention(b, &layer.cross_attn, &n, &memory, &cross_bias, h)?;
        x = b.add(&x, &dropout(b, a, &mut drop)?)?;
        let n = b.rms_norm(&x, &layer.ffn_norm, NORM_EPS)?;
        let f = ffn(b, &n, &layer.wi, &layer.wo)?;
        x = b.add(&x, &dropout(b, f, &mut drop)?)?;
    }
    let out = b.rms_norm(&x, &w.dec_final_norm, NORM_EPS)?;
    let out = dropout(b, out, &mut drop)?;
    let emb_t = b.permute(&w.embedding, &[1, 0])?;
    Ok(b.scale(&b.matmul(&out, &emb_t)?, 1.0 / (c.d_model as f64).sqrt()))
}
