//! Run settings: defaults, then the config file, then flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use t5lab::mds::{Metric, QueryMode};
use t5lab::metrics::MultiRef;

use crate::error::{CliError, Result};

/// Settings of one subcommand. Path fields are listed so they can be made
/// absolute before they are frozen into the manifest.
pub trait Settings: Serialize + DeserializeOwned + Default {
    /// `(name, required, value)` for every input path.
    fn paths(&mut self) -> Vec<(&'static str, bool, &mut Option<String>)>;

    /// Inputs that are not plain optional paths.
    fn resolve_extra(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Reads a TOML run config. A table named after the subcommand, when
/// present, is used in place of the whole file.
pub fn read_config(path: &Path, command: &str) -> Result<Map<String, Value>> {
    let src = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let table: toml::Table = src
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let table = match table.get(command) {
        Some(toml::Value::Table(t)) => t.clone(),
        _ => table,
    };
    match serde_json::to_value(table).expect("toml maps to json") {
        Value::Object(m) => Ok(m),
        _ => unreachable!("a table is an object"),
    }
}

/// Layers `file` and then `flags` over the defaults and checks the result.
pub fn merge<S: Settings>(file: Option<Map<String, Value>>, flags: Map<String, Value>) -> Result<S> {
    let mut merged = match serde_json::to_value(S::default()).expect("settings serialize") {
        Value::Object(m) => m,
        _ => unreachable!("settings are structs"),
    };
    for layer in file.into_iter().chain([flags]) {
        for (k, v) in layer {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    from_value(Value::Object(merged))
}

pub fn from_value<S: Settings>(v: Value) -> Result<S> {
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

/// Checks required paths and makes every path absolute.
pub fn resolve_paths<S: Settings>(settings: &mut S) -> Result<()> {
    for (name, required, value) in settings.paths() {
        match value {
            None if required => return Err(CliError::Usage(format!("missing required setting `{name}`"))),
            None => {}
            Some(p) => {
                *p = absolute(p)?;
            }
        }
    }
    settings.resolve_extra()
}

fn absolute(p: &str) -> Result<String> {
    Ok(std::fs::canonicalize(p).map_err(|e| CliError::io(p, e))?.display().to_string())
}

pub fn is_preset(model: &str) -> bool {
    t5lab::model::PRESET_NAMES.contains(&model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabTrain {
    pub corpus: Option<String>,
    /// NER data whose sentences join the training text and whose labels
    /// become atomic tag pieces.
    pub ner_data: Option<String>,
    pub size: u32,
    pub sentinels: u32,
    pub seed: u64,
}

impl Default for VocabTrain {
    fn default() -> Self {
        Self {
            corpus: None,
            ner_data: None,
            size: t5lab::tokenizer::DEFAULT_VOCAB_SIZE,
            sentinels: t5lab::tokenizer::DEFAULT_SENTINELS,
            seed: 0,
        }
    }
}

impl Settings for VocabTrain {
    fn paths(&mut self) -> Vec<(&'static str, bool, &mut Option<String>)> {
        vec![("corpus", true, &mut self.corpus), ("ner_data", false, &mut self.ner_data)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Summarize,
    Ner,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "summarize" => Ok(Task::Summarize),
            "ner" => Ok(Task::Ner),
            _ => Err(format!("unknown task {s:?} (expected summarize or ner)")),
        }
    }
}

/// Shared by `pretrain` and `finetune`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Train {
    /// Corpus JSONL for pretraining; pairs or NER sentences for finetuning.
    pub data: Option<String>,
    pub vocab: Option<String>,
    /// Checkpoint to start from. Its model config is used.
    pub init: Option<String>,
    /// Preset name or model config file, used without `init`.
    pub model: String,
    pub task: Task,
    pub max_input_len: Option<usize>,
    pub max_target_len: Option<usize>,
    pub steps: u64,
    pub seed: u64,
    pub lr: f64,
    pub warmup: u64,
    pub batch_tokens: usize,
    pub ckpt_every: u64,
    pub dropout: bool,
    pub corruption_rate: f64,
    pub mean_span_length: f64,
    /// `f64` or `f32` for the final checkpoint.
    pub precision: String,
}

impl Default for Train {
    fn default() -> Self {
        let t = t5lab::training::TrainConfig::default();
        let c = t5lab::training::CorruptionSpec::default();
        Self {
            data: None,
            vocab: None,
            init: None,
            model: "tiny".into(),
            task: Task::Summarize,
            max_input_len: None,
            max_target_len: None,
            steps: t.steps,
            seed: t.seed,
            lr: t.peak_lr,
            warmup: t.warmup_steps,
            batch_tokens: t.batch_tokens,
            ckpt_every: t.ckpt_every,
            dropout: t.dropout,
            corruption_rate: c.corruption_rate,
            mean_span_length: c.mean_span_length,
            precision: "f64".into(),
        }
    }
}

impl Settings for Train {
    fn paths(&mut self) -> Vec<(&'static str, bool, &mut Option<String>)> {
        vec![
            ("data", true, &mut self.data),
            ("vocab", true, &mut self.vocab),
            ("init", false, &mut self.init),
        ]
    }

    /// A model given as a file rather than a preset name is an input too.
    fn resolve_extra(&mut self) -> Result<()> {
        if !is_preset(&self.model) {
            self.model = absolute(&self.model)?;
        }
        Ok(())
    }
}

/// Decode settings; `max_len` defaults to the model's target length.
pub fn decode_config(
    beam: usize,
    max_len: Option<usize>,
    length_penalty: f64,
    model: &t5lab::model::ModelConfig,
) -> t5lab::generation::DecodeConfig {
    t5lab::generation::DecodeConfig {
        length_penalty,
        ..t5lab::generation::DecodeConfig::beam(max_len.unwrap_or(model.max_target_len), beam)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Generate {
    pub ckpt: Option<String>,
    pub vocab: Option<String>,
    pub input: Option<String>,
    pub task: Task,
    pub seed: u64,
    pub beam: usize,
    pub max_len: Option<usize>,
    pub length_penalty: f64,
}

impl Default for Generate {
    fn default() -> Self {
        Self {
            ckpt: None,
            vocab: None,
            input: None,
            task: Task::Summarize,
            seed: 0,
            beam: 1,
            max_len: None,
            length_penalty: 0.0,
        }
    }
}

impl Settings for Generate {
    fn paths(&mut self) -> Vec<(&'static str, bool, &mut Option<String>)> {
        vec![
            ("ckpt", true, &mut self.ckpt),
            ("vocab", true, &mut self.vocab),
            ("input", true, &mut self.input),
        ]
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRouge {
    pub cand: Option<String>,
    #[serde(rename = "ref")]
    pub reference: Option<String>,
    pub multi_ref: MultiRef,
    pub seed: u64,
}

impl Settings for EvalRouge {
    fn paths(&mut self) -> Vec<(&'static str, bool, &mut Option<String>)> {
        vec![("cand", true, &mut self.cand), ("ref", true, &mut self.reference)]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalNer {
    pub ckpt: Option<String>,
    pub vocab: Option<String>,
    pub data: Option<String>,
    pub seed: u64,
    pub beam: usize,
    pub max_len: Option<usize>,
    pub length_penalty: f64,
}

impl Default for EvalNer {
    fn default() -> Self {
        Self {
            ckpt: None,
            vocab: None,
            data: None,
            seed: 0,
            beam: 1,
            max_len: None,
            length_penalty: 0.0,
        }
    }
}

impl Settings for EvalNer {
    fn paths(&mut self) -> Vec<(&'static str, bool, &mut Option<String>)> {
        vec![
            ("ckpt", true, &mut self.ckpt),
            ("vocab", true, &mut self.vocab),
            ("data", true, &mut self.data),
        ]
    }
}

/// Shared by `mds-extract` and `mds-abstract`; the decoding fields only
/// matter to the latter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mds {
    pub clusters: Option<String>,
    pub ckpt: Option<String>,
    pub vocab: Option<String>,
    pub k: usize,
    pub mode: QueryMode,
    pub metric: Metric,
    pub multi_ref: MultiRef,
    pub seed: u64,
    pub beam: usize,
    pub max_len: Option<usize>,
    pub length_penalty: f64,
}

impl Default for Mds {
    fn default() -> Self {
        Self {
            clusters: None,
            ckpt: None,
            vocab: None,
            k: t5lab::mds::DEFAULT_K,
            mode: QueryMode::Reference,
            metric: Metric::Cosine,
            multi_ref: MultiRef::Max,
            seed: 0,
            beam: 1,
            max_len: None,
            length_penalty: 0.0,
        }
    }
}

impl Settings for Mds {
    fn paths(&mut self) -> Vec<(&'static str, bool, &mut Option<String>)> {
        vec![
            ("clusters", true, &mut self.clusters),
            ("ckpt", true, &mut self.ckpt),
            ("vocab", true, &mut self.vocab),
        ]
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stats {
    pub data: Option<String>,
    pub vocab: Option<String>,
    pub seed: u64,
}

impl Settings for Stats {
    fn paths(&mut self) -> Vec<(&'static str, bool, &mut Option<String>)> {
        vec![("data", true, &mut self.data), ("vocab", false, &mut self.vocab)]
    }
}
