//! Span corruption, batching, loss, Adam and the training loop shared by
//! pretraining and finetuning.

mod corrupt;
mod optim;

pub use corrupt::{encoder_input, sample_subset, span_corrupt, span_plan, CorruptionExample, CorruptionSpec, Sentinels};
pub use optim::{lr_schedule, Adam, AdamHyper, ADAM_EPS, BETA1, BETA2};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{forward, Dropout, ModelConfig, ModelError, ModelParams, Weights};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::tokenizer::{EOS_ID, PAD_ID};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("span corruption: {0}")]
    Corruption(String),
    #[error("no usable training examples")]
    NoData,
    #[error("every target position is padding")]
    AllPadding,
    #[error("non-finite {what} at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFinite {
        what: &'static str,
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::AllMasked => TrainError::AllPadding,
            e => TrainError::Model(ModelError::Tensor(e)),
        }
    }
}

/// An (encoder input, target) pair. The input ends with eos; so does the
/// target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

impl Example {
    /// Builds a model-ready pair from raw ids, appending eos to both sides and
    /// truncating to the config maxima.
    pub fn from_ids(input: &[u32], target: &[u32], config: &ModelConfig) -> Self {
        Self {
            input: encoder_input(input, config.max_input_len),
            target: encoder_input(target, config.max_target_len),
        }
    }

    fn clamp(&self, config: &ModelConfig) -> Self {
        let cut = |v: &[u32], max: usize| {
            if v.len() <= max {
                v.to_vec()
            } else {
                let mut out = v[..max - 1].to_vec();
                out.push(EOS_ID);
                out
            }
        };
        Self {
            input: cut(&self.input, config.max_input_len),
            target: cut(&self.target, config.max_target_len),
        }
    }

    pub fn token_count(&self) -> usize {
        self.input.len() + self.target.len()
    }
}

/// Decoder input for teacher forcing: the target shifted right behind the
/// start token (pad).
pub fn shift_right(target: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(target.len());
    v.push(PAD_ID);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

fn flat_targets(targets: &[Vec<u32>], t_max: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = Vec::with_capacity(targets.len() * t_max);
    let mut mask = Vec::with_capacity(targets.len() * t_max);
    for t in targets {
        for i in 0..t_max {
            ids.push(t.get(i).copied().unwrap_or(PAD_ID) as usize);
            mask.push(i < t.len());
        }
    }
    (ids, mask)
}

/// Mean negative log-likelihood of `targets` under `logits [B, T, V]`,
/// ignoring positions past each target's length.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[Vec<u32>]) -> Result<f64, TrainError> {
    let t_max = logits.shape().get(1).copied().unwrap_or(0);
    let (ids, mask) = flat_targets(targets, t_max);
    Ok(logits.cross_entropy(&ids, &mask)?.item())
}

/// Groups examples into batches whose padded token count stays within
/// `budget`. Examples are sorted by length first so batches pad little;
/// batch order is then shuffled by `seed`. Every batch holds at least one
/// example.
pub fn token_budget_batches(examples: &[Example], budget: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].input.len(), examples[i].target.len(), i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let (mut max_in, mut max_tgt) = (0, 0);
    for i in order {
        let e = &examples[i];
        let (mi, mt) = (max_in.max(e.input.len()), max_tgt.max(e.target.len()));
        if !cur.is_empty() && (cur.len() + 1) * (mi + mt) > budget {
            batches.push(std::mem::take(&mut cur));
            max_in = e.input.len();
            max_tgt = e.target.len();
        } else {
            max_in = mi;
            max_tgt = mt;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches
}

/// SplitMix64 over the parts; used to derive independent sub-seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub enum DataSource<'a> {
    /// Paragraph token ids, re-corrupted every epoch with fresh seeds.
    Pretrain {
        paragraphs: &'a [Vec<u32>],
        spec: CorruptionSpec,
        sentinels: Sentinels,
    },
    /// Fixed (input, target) pairs.
    Finetune { pairs: &'a [Example] },
}

impl DataSource<'_> {
    fn epoch(&self, config: &ModelConfig, seed: u64, epoch: u64) -> Vec<Example> {
        match self {
            DataSource::Pretrain {
                paragraphs,
                spec,
                sentinels,
            } => paragraphs
                .par_iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let s = spec.with_seed(derive_seed(&[spec.seed, seed, epoch, i as u64]));
                    let ex = span_corrupt(p, &s, *sentinels).ok()?;
                    Some(
                        Example {
                            input: encoder_input(&ex.input_ids, config.max_input_len),
                            target: ex.target_ids,
                        }
                        .clamp(config),
                    )
                })
                .collect(),
            DataSource::Finetune { pairs } => pairs.iter().map(|e| e.clamp(config)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Padded tokens (input plus target) per batch.
    pub batch_tokens: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub ckpt_every: u64,
    pub ckpt_dir: Option<PathBuf>,
    /// Apply the config's dropout rate.
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            peak_lr: 1e-3,
            warmup_steps: 100,
            batch_tokens: 4096,
            seed: 0,
            ckpt_every: 0,
            ckpt_dir: None,
            dropout: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub learning_rate: f64,
    pub tokens_seen: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e).expect("log entry serializes"))?;
        }
        w.flush()
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: Adam,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    batch: &[&Example],
    lr: f64,
    dropout: Option<&mut Dropout>,
) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let w = Weights::bind(&tape, params);
    let enc: Vec<Vec<u32>> = batch.iter().map(|e| e.input.clone()).collect();
    let dec: Vec<Vec<u32>> = batch.iter().map(|e| shift_right(&e.target)).collect();
    let targets: Vec<Vec<u32>> = batch.iter().map(|e| e.target.clone()).collect();
    let logits = forward(&tape, &w, &enc, &dec, dropout)?;
    let t_max = tape.value(logits).shape()[1];
    let (ids, mask) = flat_targets(&targets, t_max);
    let loss_var = tape.cross_entropy(logits, &ids, &mask)?;
    let loss = tape.value(loss_var).item();
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = tape.backward(loss_var)?;
    let g: Vec<Option<&Tensor>> = w.all.iter().map(|&v| grads.get(v)).collect();
    opt.update(params, &g, lr);
    Ok(loss)
}

/// Runs `cfg.steps` optimizer steps, continuing from `opt.step`.
///
/// The batch stream is a pure function of `cfg.seed`, so a run resumed from
/// a checkpoint sees the same batches it would have seen uninterrupted.
pub fn train_loop(
    mut params: ModelParams,
    mut opt: Adam,
    data: &DataSource,
    cfg: &TrainConfig,
    mut on_step: Option<&mut dyn FnMut(&LogEntry)>,
) -> Result<TrainOutcome, TrainError> {
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            params,
            optimizer: opt,
            log,
            checkpoints,
        });
    }
    let config = params.config().clone();
    let start = opt.step;
    let end = start + cfg.steps;
    let mut tokens_seen = 0u64;
    let mut global = 0u64;
    let mut epoch = 0u64;
    'outer: loop {
        let examples = data.epoch(&config, cfg.seed, epoch);
        if examples.is_empty() {
            return Err(TrainError::NoData);
        }
        let batches = token_budget_batches(&examples, cfg.batch_tokens, derive_seed(&[cfg.seed, epoch, 1]));
        for batch in batches {
            global += 1;
            if global <= start {
                // replayed so a resumed run reports the same running totals
                tokens_seen += batch.iter().map(|&i| examples[i].token_count() as u64).sum::<u64>();
                continue;
            }
            if global > end {
                break 'outer;
            }
            let step = global;
            let lr = lr_schedule(step, cfg.warmup_steps, cfg.peak_lr);
            let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let mut drop = (cfg.dropout && config.dropout_rate > 0.0).then(|| Dropout {
                rate: config.dropout_rate,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, step, 2])),
            });
            let loss = train_step(&mut params, &mut opt, &refs, lr, drop.as_mut())?;
            let bad = |what| TrainError::NonFinite {
                what,
                step,
                last_checkpoint: checkpoints.last().cloned(),
            };
            if !loss.is_finite() {
                return Err(bad("loss"));
            }
            if !params.all_finite() {
                return Err(bad("parameter"));
            }
            tokens_seen += refs.iter().map(|e| e.token_count() as u64).sum::<u64>();
            let entry = LogEntry {
                step,
                loss,
                learning_rate: lr,
                tokens_seen,
            };
            if let Some(f) = on_step.as_deref_mut() {
                f(&entry);
            }
            log.entries.push(entry);
            if cfg.ckpt_every > 0 && step.is_multiple_of(cfg.ckpt_every) {
                if let Some(dir) = &cfg.ckpt_dir {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join(format!("step-{step:06}.ckpt"));
                    Checkpoint::new(params.clone(), Some(opt.clone())).save(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        epoch += 1;
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        log,
        checkpoints,
    })
}
