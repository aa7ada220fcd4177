//! Greedy and beam-search decoding.
//!
//! Decoders drive a [`StepScorer`], which hands out next-token
//! log-probabilities for a prefix. [`ModelScorer`] backs it with the cached
//! incremental decoder; tests use lookup tables.

use rayon::prelude::*;

use crate::model::{DecoderState, EncoderMemory, InferenceModel, ModelError};
use crate::tokenizer::{EOS_ID, PAD_ID};

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    /// Maximum number of generated tokens, eos included.
    pub max_len: usize,
    pub beam_size: usize,
    /// Hypotheses are ranked by `log_prob / len^alpha`; 0 disables.
    pub length_penalty: f64,
    pub eos_id: u32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_len: 64,
            beam_size: 1,
            length_penalty: 0.0,
            eos_id: EOS_ID,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            max_len,
            ..Self::default()
        }
    }

    pub fn beam(max_len: usize, beam_size: usize) -> Self {
        Self {
            max_len,
            beam_size,
            ..Self::default()
        }
    }

    pub fn validate(&self, max_target_len: usize) -> Result<(), GenerationError> {
        if self.beam_size == 0 {
            return Err(GenerationError::Config("beam_size must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(GenerationError::Config(format!(
                "length_penalty must be a finite value >= 0, got {}",
                self.length_penalty
            )));
        }
        if self.max_len > max_target_len {
            return Err(GenerationError::Config(format!(
                "max_len {} exceeds the model's max_target_len {max_target_len}",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Source of next-token log-probabilities.
pub trait StepScorer {
    type State: Clone;

    /// State for the empty prefix and the log-probabilities of the first token.
    fn initial(&self) -> Result<(Self::State, Vec<f64>), GenerationError>;

    /// Appends `token` to the prefix behind `state`.
    fn extend(&self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>), GenerationError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated ids without the terminating eos.
    pub ids: Vec<u32>,
    /// Sum of token log-probabilities, eos included when finished.
    pub log_prob: f64,
    /// Whether generation stopped at eos rather than at `max_len`.
    pub finished: bool,
}

impl Decoded {
    /// Tokens generated, eos included.
    pub fn generated_len(&self) -> usize {
        self.ids.len() + self.finished as usize
    }

    fn full_ids(&self, eos: u32) -> Vec<u32> {
        let mut v = self.ids.clone();
        if self.finished {
            v.push(eos);
        }
        v
    }
}

/// Length-normalised score used to rank hypotheses.
pub fn hypothesis_score(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 || len == 0 {
        log_prob
    } else {
        log_prob / (len as f64).powf(alpha)
    }
}

/// Natural-log softmax of raw logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|x| x - z).collect()
}

/// First index of the maximum; NaN never wins.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}

pub fn greedy_decode<S: StepScorer>(scorer: &S, cfg: &DecodeConfig) -> Result<Decoded, GenerationError> {
    let mut out = Decoded {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    if cfg.max_len == 0 {
        return Ok(out);
    }
    let (mut state, mut lp) = scorer.initial()?;
    for t in 0..cfg.max_len {
        let tok = argmax(&lp) as u32;
        out.log_prob += lp[tok as usize];
        if tok == cfg.eos_id {
            out.finished = true;
            break;
        }
        out.ids.push(tok);
        if t + 1 < cfg.max_len {
            (state, lp) = scorer.extend(&state, tok)?;
        }
    }
    Ok(out)
}

struct Live<S> {
    ids: Vec<u32>,
    log_prob: f64,
    state: S,
    next: Vec<f64>,
}

/// Orders hypotheses best first: higher score, then the smaller id sequence
/// (eos included) in lexicographic order, so a proper prefix wins.
fn better(a: (f64, &[u32]), b: (f64, &[u32])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search over `cfg.beam_size` hypotheses. At every step the
/// `beam_size` best one-token extensions survive; those ending in eos are
/// set aside as finished. Hypotheses still open at `max_len` compete with
/// the finished ones. With `beam_size = 1` this is exactly
/// [`greedy_decode`].
pub fn beam_decode<S: StepScorer>(scorer: &S, cfg: &DecodeConfig) -> Result<Decoded, GenerationError> {
    if cfg.beam_size == 0 {
        return Err(GenerationError::Config("beam_size must be at least 1".into()));
    }
    if cfg.max_len == 0 {
        return Ok(Decoded {
            ids: Vec::new(),
            log_prob: 0.0,
            finished: false,
        });
    }
    let (state, next) = scorer.initial()?;
    let mut live = vec![Live {
        ids: Vec::new(),
        log_prob: 0.0,
        state,
        next,
    }];
    let mut done: Vec<Decoded> = Vec::new();
    for t in 0..cfg.max_len {
        // (parent, token, cumulative log-prob, ids with token)
        let mut cands: Vec<(usize, u32, f64, Vec<u32>)> = Vec::new();
        for (pi, h) in live.iter().enumerate() {
            for (tok, lp) in h.next.iter().enumerate() {
                let mut ids = h.ids.clone();
                ids.push(tok as u32);
                cands.push((pi, tok as u32, h.log_prob + lp, ids));
            }
        }
        // every candidate at this step has length t + 1, so raw sums rank
        // them the same way as normalised scores
        cands.sort_by(|a, b| better((a.2, &a.3), (b.2, &b.3)));
        cands.truncate(cfg.beam_size);
        let mut next_live = Vec::new();
        for (pi, tok, lp, mut ids) in cands {
            if tok == cfg.eos_id {
                ids.pop();
                done.push(Decoded {
                    ids,
                    log_prob: lp,
                    finished: true,
                });
            } else if t + 1 == cfg.max_len {
                done.push(Decoded {
                    ids,
                    log_prob: lp,
                    finished: false,
                });
            } else {
                let (state, next) = scorer.extend(&live[pi].state, tok)?;
                next_live.push(Live {
                    ids,
                    log_prob: lp,
                    state,
                    next,
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        // with no length penalty log-probs only fall, so an open hypothesis
        // can no longer beat the best finished one
        if cfg.length_penalty == 0.0 {
            let best_done = done.iter().map(|d| d.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.log_prob < best_done) {
                break;
            }
        }
    }
    let key = |d: &Decoded| hypothesis_score(d.log_prob, d.generated_len(), cfg.length_penalty);
    let best = done
        .into_iter()
        .min_by(|a, b| better((key(a), &a.full_ids(cfg.eos_id)), (key(b), &b.full_ids(cfg.eos_id))))
        .expect("at least one hypothesis");
    Ok(best)
}

/// Dispatches on `beam_size`.
pub fn decode<S: StepScorer>(scorer: &S, cfg: &DecodeConfig) -> Result<Decoded, GenerationError> {
    if cfg.beam_size == 1 {
        greedy_decode(scorer, cfg)
    } else {
        beam_decode(scorer, cfg)
    }
}

/// A trained model conditioned on one encoded input.
pub struct ModelScorer<'a> {
    model: &'a InferenceModel,
    memory: EncoderMemory,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a InferenceModel, enc_ids: &[u32]) -> Result<Self, GenerationError> {
        Ok(Self {
            model,
            memory: model.encode(enc_ids)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn initial(&self) -> Result<(DecoderState, Vec<f64>), GenerationError> {
        let mut s = self.model.start();
        let logits = self.model.step(&self.memory, &mut s, PAD_ID)?;
        Ok((s, log_softmax(&logits)))
    }

    fn extend(&self, state: &DecoderState, token: u32) -> Result<(DecoderState, Vec<f64>), GenerationError> {
        let mut s = state.clone();
        let logits = self.model.step(&self.memory, &mut s, token)?;
        Ok((s, log_softmax(&logits)))
    }
}

/// Decodes one encoder input (eos-terminated ids) with a model.
pub fn generate(model: &InferenceModel, enc_ids: &[u32], cfg: &DecodeConfig) -> Result<Decoded, GenerationError> {
    cfg.validate(model.config().max_target_len)?;
    decode(&ModelScorer::new(model, enc_ids)?, cfg)
}

/// Decodes inputs in parallel; output order follows input order.
pub fn generate_batch(
    model: &InferenceModel,
    inputs: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>, GenerationError> {
    cfg.validate(model.config().max_target_len)?;
    inputs.par_iter().map(|ids| decode(&ModelScorer::new(model, ids)?, cfg)).collect()
}
