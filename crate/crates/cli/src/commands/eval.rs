use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use t5lab::corpus::{dataset_stats, read_jsonl};
use t5lab::generation::generate_batch;
use t5lab::metrics::corpus_rouge_multi;
use t5lab::ner::{dataset_labels, evaluate_ner, read_ner_jsonl, ModelTagger};
use t5lab::tokenizer::Vocabulary;
use t5lab::training::encoder_input;

use super::{load_model, load_vocab, required};
use crate::error::{CliError, Result};
use crate::manifest::Recorder;
use crate::settings::{decode_config, EvalNer, EvalRouge, Generate, Stats, Task};

#[derive(Serialize)]
struct Generated {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tagged: Option<String>,
}

pub fn generate(s: &Generate, rec: &mut Recorder) -> Result<()> {
    let input = rec.input(required(&s.input, "input")?)?;
    let vocab = load_vocab(rec, &s.vocab)?;
    let model = load_model(rec, &s.ckpt, &vocab)?;
    let items: Vec<(String, String)> = match s.task {
        Task::Summarize => read_jsonl(&input)?.into_iter().map(|d| (d.id, d.body)).collect(),
        Task::Ner => read_ner_jsonl(&input)?
            .into_iter()
            .enumerate()
            .map(|(i, d)| (i.to_string(), d.tokens.join(" ")))
            .collect(),
    };
    let max_in = model.config().max_input_len;
    let inputs: Vec<Vec<u32>> = items.iter().map(|(_, t)| encoder_input(&vocab.encode(t).ids, max_in)).collect();
    let decoded = generate_batch(&model, &inputs, &decode_config(s.beam, s.max_len, s.length_penalty, model.config()))?;
    let rows = items
        .into_iter()
        .zip(decoded)
        .map(|((id, _), d)| {
            let text = vocab.decode(&d.ids)?;
            Ok(match s.task {
                Task::Summarize => Generated {
                    id,
                    summary: Some(text),
                    tagged: None,
                },
                Task::Ner => Generated {
                    id,
                    summary: None,
                    tagged: Some(text),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = rec.write_jsonl("generated.jsonl", &rows)?;
    println!("generate: {} outputs -> {}", rows.len(), path.display());
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<Value>> {
    let src = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn field<'a>(row: &'a Value, path: &Path, keys: &[&str]) -> Result<&'a Value> {
    keys.iter()
        .find_map(|k| row.get(*k))
        .ok_or_else(|| CliError::Config(format!("{}: a line lacks {}", path.display(), keys.join(" / "))))
}

fn as_text(v: &Value, path: &Path) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| CliError::Config(format!("{}: expected a string, found {v}", path.display())))
}

fn row_id(row: &Value, path: &Path) -> Result<String> {
    match field(row, path, &["id"])? {
        Value::String(s) => Ok(s.clone()),
        v => Ok(v.to_string()),
    }
}

#[derive(Serialize)]
struct RougeReport {
    multi_ref: t5lab::metrics::MultiRef,
    #[serde(flatten)]
    rouge: t5lab::metrics::CorpusRouge,
}

pub fn eval_rouge(s: &EvalRouge, rec: &mut Recorder) -> Result<()> {
    let cand_path = rec.input(required(&s.cand, "cand")?)?;
    let ref_path = rec.input(required(&s.reference, "ref")?)?;
    let mut refs: HashMap<String, Vec<String>> = HashMap::new();
    for row in read_rows(&ref_path)? {
        let texts = match field(&row, &ref_path, &["references", "abstract", "reference", "summary"])? {
            Value::Array(a) => a.iter().map(|v| as_text(v, &ref_path)).collect::<Result<_>>()?,
            v => vec![as_text(v, &ref_path)?],
        };
        refs.insert(row_id(&row, &ref_path)?, texts);
    }
    let mut pairs = Vec::new();
    for row in read_rows(&cand_path)? {
        let id = row_id(&row, &cand_path)?;
        let cand = as_text(field(&row, &cand_path, &["summary", "text", "tagged"])?, &cand_path)?;
        let r = refs
            .get(&id)
            .ok_or_else(|| CliError::Config(format!("no reference for candidate {id:?}")))?;
        pairs.push((cand, r.clone()));
    }
    let report = RougeReport {
        multi_ref: s.multi_ref,
        rouge: corpus_rouge_multi(&pairs, s.multi_ref)?,
    };
    let path = rec.write_json("report.json", &report)?;
    let m = &report.rouge.mean;
    println!(
        "eval-rouge: {} pairs, F1 R1 {:.4} R2 {:.4} RL {:.4} -> {}",
        report.rouge.pairs,
        m.rouge1.f1,
        m.rouge2.f1,
        m.rouge_l.f1,
        path.display()
    );
    Ok(())
}

pub fn eval_ner(s: &EvalNer, rec: &mut Recorder) -> Result<()> {
    let data = read_ner_jsonl(&rec.input(required(&s.data, "data")?)?)?;
    let vocab: Vocabulary = load_vocab(rec, &s.vocab)?;
    let model = load_model(rec, &s.ckpt, &vocab)?;
    let labels = dataset_labels(&data)?;
    let tagger = ModelTagger {
        model: &model,
        vocab: &vocab,
        decode: decode_config(s.beam, s.max_len, s.length_penalty, model.config()),
    };
    let report = evaluate_ner(&tagger, &data, &labels)?;
    let path = rec.write_json("report.json", &report)?;
    println!(
        "eval-ner: {} sentences, micro-F1 {:.4} (tp {} fp {} fn {}) -> {}",
        data.len(),
        report.micro_f1,
        report.tp,
        report.fp,
        report.fn_,
        path.display()
    );
    Ok(())
}

pub fn stats(s: &Stats, rec: &mut Recorder) -> Result<()> {
    let docs = read_jsonl(&rec.input(required(&s.data, "data")?)?)?;
    let vocab = match &s.vocab {
        Some(_) => Some(load_vocab(rec, &s.vocab)?),
        None => None,
    };
    let report = dataset_stats(&docs, vocab.as_ref());
    rec.write_json("stats.json", &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("stats serialize"));
    Ok(())
}
