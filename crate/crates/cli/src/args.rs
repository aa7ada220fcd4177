use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use t5lab::mds::{Metric, QueryMode};
use t5lab::metrics::MultiRef;

use crate::settings::Task;

#[derive(Parser, Debug)]
#[command(name = "t5lab", version, about = "Train, decode and evaluate small T5-style models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a subword vocabulary on a JSONL corpus.
    VocabTrain(VocabTrainArgs),
    /// Span-corruption pretraining.
    Pretrain(TrainArgs),
    /// Supervised training on summarization pairs or NER sentences.
    Finetune(TrainArgs),
    /// Decode outputs for every line of an input file.
    Generate(GenerateArgs),
    /// Corpus ROUGE of candidates against references.
    EvalRouge(EvalRougeArgs),
    /// Micro-F1 of a tagging model on an NER dataset.
    EvalNer(EvalNerArgs),
    /// Rank cluster sentences and keep the top K.
    MdsExtract(MdsArgs),
    /// Extract, then summarize the extracted context.
    MdsAbstract(MdsArgs),
    /// Dataset statistics.
    Stats(StatsArgs),
    /// Repeat a run from its manifest into a new directory.
    Rerun(RerunArgs),
}

/// Options every run accepts. Not part of the frozen settings.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run config file (TOML). Flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $T5LAB_OUTPUT_DIR/<command>, else ./t5lab-out/<command>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct VocabTrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Corpus JSONL ({"id", "body", "abstract"?}).
    #[arg(long)]
    pub corpus: Option<String>,
    /// NER JSONL whose labels become atomic tag pieces.
    #[arg(long)]
    pub ner_data: Option<String>,
    /// Target vocabulary size.
    #[arg(long)]
    pub size: Option<u32>,
    #[arg(long)]
    pub sentinels: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Training data: corpus JSONL, or pairs / NER JSONL for finetuning.
    #[arg(long, visible_alias = "corpus")]
    pub data: Option<String>,
    #[arg(long)]
    pub vocab: Option<String>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<String>,
    /// Preset name (tiny, base-256, base-1024, large-1024) or model config file.
    #[arg(long)]
    pub model: Option<String>,
    /// summarize or ner (finetune only).
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub max_input_len: Option<usize>,
    #[arg(long)]
    pub max_target_len: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Padded tokens per batch.
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    /// Checkpoint interval in steps; 0 disables.
    #[arg(long)]
    pub ckpt_every: Option<u64>,
    #[arg(long)]
    pub dropout: Option<bool>,
    #[arg(long)]
    pub corruption_rate: Option<f64>,
    #[arg(long)]
    pub mean_span_length: Option<f64>,
    /// f64 or f32 for the final checkpoint.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: Option<String>,
    #[arg(long)]
    pub vocab: Option<String>,
    /// Corpus JSONL (summarize) or NER JSONL (ner).
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Generated tokens per output, eos included [default: the model's max_target_len]
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalRougeArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Candidates: JSONL with "id" and "summary".
    #[arg(long)]
    pub cand: Option<String>,
    /// References: JSONL with "id" and "abstract" or "references".
    #[arg(long = "ref")]
    #[serde(rename = "ref")]
    pub reference: Option<String>,
    /// max or mean over several references.
    #[arg(long)]
    pub multi_ref: Option<MultiRef>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalNerArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: Option<String>,
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct MdsArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Cluster JSONL ({"id", "documents", "references"}).
    #[arg(long)]
    pub clusters: Option<String>,
    #[arg(long)]
    pub ckpt: Option<String>,
    #[arg(long)]
    pub vocab: Option<String>,
    /// Sentences kept per cluster.
    #[arg(long)]
    pub k: Option<usize>,
    /// reference or centroid.
    #[arg(long)]
    pub mode: Option<QueryMode>,
    /// cosine, manhattan or euclidean.
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub multi_ref: Option<MultiRef>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Corpus JSONL.
    #[arg(long)]
    pub data: Option<String>,
    /// Adds token counts.
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    /// A manifest.json written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
}
