use std::collections::HashMap;

use t5lab::checkpoint::{Checkpoint, Precision};
use t5lab::corpus::{bucket_paragraphs, read_jsonl};
use t5lab::model::{init_params, ModelConfig, ModelParams};
use t5lab::ner::{dataset_labels, read_ner_jsonl};
use t5lab::tokenizer::{train_vocab, TrainOptions, Vocabulary};
use t5lab::training::{train_loop, Adam, CorruptionSpec, DataSource, Example, LogEntry, Sentinels, TrainConfig};

use super::{load_vocab, required};
use crate::error::{CliError, Result};
use crate::manifest::Recorder;
use crate::settings::{is_preset, Task, Train, VocabTrain};

pub fn vocab_train(s: &VocabTrain, rec: &mut Recorder) -> Result<()> {
    let docs = read_jsonl(&rec.input(required(&s.corpus, "corpus")?)?)?;
    let mut text: Vec<String> = docs
        .iter()
        .flat_map(|d| std::iter::once(d.body.clone()).chain(d.r#abstract.clone()))
        .collect();
    let mut user_pieces = Vec::new();
    if let Some(p) = &s.ner_data {
        let data = read_ner_jsonl(&rec.input(p)?)?;
        text.extend(data.iter().map(|d| d.tokens.join(" ")));
        user_pieces = dataset_labels(&data)?.tag_pieces();
    }
    let opts = TrainOptions {
        target_size: s.size,
        sentinel_count: s.sentinels,
        user_pieces,
    };
    let vocab = train_vocab(&text, &opts)?;
    let path = rec.output("vocab.txt");
    vocab.save(&path)?;
    println!("vocab-train: {} pieces, {} merges -> {}", vocab.size(), vocab.merges().len(), path.display());
    Ok(())
}

fn rebuild(params: ModelParams, config: ModelConfig) -> Result<ModelParams> {
    let named: HashMap<String, _> = params.iter().map(|(n, t)| (n.to_string(), (**t).clone())).collect();
    Ok(ModelParams::from_named(config, named)?)
}

/// Parameters from `init`, or fresh ones for the configured model sized to
/// the vocabulary. Length overrides apply either way.
fn initial_params(s: &Train, vocab: &Vocabulary, rec: &mut Recorder) -> Result<ModelParams> {
    let params = match &s.init {
        Some(p) => {
            let params = Checkpoint::load(&rec.input(p)?)?.params;
            let v = params.config().vocab_size;
            if v != vocab.size() as usize {
                return Err(CliError::Config(format!(
                    "checkpoint vocab_size {v} does not match the vocabulary's {}",
                    vocab.size()
                )));
            }
            params
        }
        None => {
            let mut c = if is_preset(&s.model) {
                ModelConfig::preset(&s.model)?
            } else {
                ModelConfig::load(&rec.input(&s.model)?)?
            };
            c.vocab_size = vocab.size() as usize;
            init_params(&c, s.seed)?
        }
    };
    let mut c = params.config().clone();
    c.max_input_len = s.max_input_len.unwrap_or(c.max_input_len);
    c.max_target_len = s.max_target_len.unwrap_or(c.max_target_len);
    if &c == params.config() {
        Ok(params)
    } else {
        c.validate()?;
        rebuild(params, c)
    }
}

fn precision(s: &Train) -> Result<Precision> {
    match s.precision.as_str() {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        p => Err(CliError::Config(format!("unknown precision {p:?} (expected f64 or f32)"))),
    }
}

fn train_and_save(command: &str, s: &Train, params: ModelParams, data: &DataSource, rec: &mut Recorder) -> Result<()> {
    let precision = precision(s)?;
    let cfg = TrainConfig {
        steps: s.steps,
        peak_lr: s.lr,
        warmup_steps: s.warmup,
        batch_tokens: s.batch_tokens,
        seed: s.seed,
        ckpt_every: s.ckpt_every,
        ckpt_dir: if s.ckpt_every > 0 { Some(rec.subdir("checkpoints")?) } else { None },
        dropout: s.dropout,
    };
    let every = (s.steps / 10).max(1);
    let mut report = |e: &LogEntry| {
        if e.step.is_multiple_of(every) {
            eprintln!("{command}: step {} loss {:.4} lr {:.2e}", e.step, e.loss, e.learning_rate);
        }
    };
    let opt = Adam::new(&params);
    let outcome = train_loop(params, opt, data, &cfg, Some(&mut report))?;
    for p in &outcome.checkpoints {
        rec.register(p)?;
    }
    let log = rec.output("log.jsonl");
    outcome.log.write_jsonl(&log).map_err(|e| CliError::io(&log, e))?;
    let mut ck = Checkpoint::new(outcome.params, Some(outcome.optimizer)).with_precision(precision);
    ck.meta.insert("command".into(), command.into());
    ck.meta.insert("seed".into(), s.seed.to_string());
    let path = rec.output("final.ckpt");
    ck.save(&path)?;
    match outcome.log.last_loss() {
        Some(l) => println!("{command}: {} steps, final loss {l:.4} -> {}", outcome.log.len(), path.display()),
        None => println!("{command}: 0 steps -> {}", path.display()),
    }
    Ok(())
}

/// Longest paragraph piece whose corrupted input and target both fit the
/// model: the target holds about `rate * (1 + 1/mean_span)` of the tokens
/// plus eos.
fn chunk_len(c: &ModelConfig, spec: &CorruptionSpec) -> usize {
    let per_token = spec.corruption_rate * (1.0 + 1.0 / spec.mean_span_length);
    let by_target = ((c.max_target_len.saturating_sub(2)) as f64 / per_token).floor() as usize;
    (c.max_input_len - 1).min(by_target).max(2)
}

pub fn pretrain(s: &Train, rec: &mut Recorder) -> Result<()> {
    let docs = read_jsonl(&rec.input(required(&s.data, "data")?)?)?;
    let vocab = load_vocab(rec, &s.vocab)?;
    let params = initial_params(s, &vocab, rec)?;
    let spec = CorruptionSpec {
        corruption_rate: s.corruption_rate,
        mean_span_length: s.mean_span_length,
        seed: s.seed,
    };
    let chunk = chunk_len(params.config(), &spec);
    let buckets = bucket_paragraphs(&docs, &vocab);
    let paragraphs: Vec<Vec<u32>> = buckets
        .short
        .iter()
        .chain(&buckets.long)
        .flat_map(|p| p.ids.chunks(chunk).map(<[u32]>::to_vec).collect::<Vec<_>>())
        .collect();
    if buckets.truncated_count() > 0 {
        eprintln!("pretrain: {} paragraphs truncated", buckets.truncated_count());
    }
    let data = DataSource::Pretrain {
        paragraphs: &paragraphs,
        spec,
        sentinels: Sentinels::of(&vocab),
    };
    train_and_save("pretrain", s, params, &data, rec)
}

pub fn finetune(s: &Train, rec: &mut Recorder) -> Result<()> {
    let path = rec.input(required(&s.data, "data")?)?;
    let vocab = load_vocab(rec, &s.vocab)?;
    let params = initial_params(s, &vocab, rec)?;
    let config = params.config().clone();
    let pair = |x: &str, y: &str| Example::from_ids(&vocab.encode(x).ids, &vocab.encode(y).ids, &config);
    let examples: Vec<Example> = match s.task {
        Task::Summarize => read_jsonl(&path)?
            .iter()
            .map(|d| match &d.r#abstract {
                Some(a) => Ok(pair(&d.body, a)),
                None => Err(CliError::Config(format!("document {:?} has no abstract", d.id))),
            })
            .collect::<Result<_>>()?,
        Task::Ner => {
            let data = read_ner_jsonl(&path)?;
            let labels = dataset_labels(&data)?;
            if let Some(missing) = labels.tag_pieces().into_iter().find(|t| vocab.user_piece_id(t).is_none()) {
                eprintln!("finetune: vocabulary has no atomic piece for {missing}; tags will be split");
            }
            data.iter()
                .map(|d| Ok(pair(&d.tokens.join(" "), &d.tagged()?.to_string())))
                .collect::<Result<_>>()?
        }
    };
    train_and_save("finetune", s, params, &DataSource::Finetune { pairs: &examples }, rec)
}
