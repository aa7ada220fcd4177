mod eval;
mod mds;
mod train;

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use t5lab::checkpoint::Checkpoint;
use t5lab::model::InferenceModel;
use t5lab::tokenizer::Vocabulary;

use crate::args::{Cli, Command, Common, RerunArgs};
use crate::error::{CliError, Result};
use crate::manifest::{Manifest, Recorder};
use crate::settings::{self, read_config, resolve_paths, Settings};

type Exec<S> = fn(&S, &mut Recorder) -> Result<()>;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::VocabTrain(a) => start("vocab-train", &a.common, &a, train::vocab_train),
        Command::Pretrain(a) => start("pretrain", &a.common, &a, train::pretrain),
        Command::Finetune(a) => start("finetune", &a.common, &a, train::finetune),
        Command::Generate(a) => start("generate", &a.common, &a, eval::generate),
        Command::EvalRouge(a) => start("eval-rouge", &a.common, &a, eval::eval_rouge),
        Command::EvalNer(a) => start("eval-ner", &a.common, &a, eval::eval_ner),
        Command::MdsExtract(a) => start("mds-extract", &a.common, &a, mds::extract),
        Command::MdsAbstract(a) => start("mds-abstract", &a.common, &a, mds::abstractive),
        Command::Stats(a) => start("stats", &a.common, &a, eval::stats),
        Command::Rerun(a) => rerun(a),
    }
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    match threads {
        None => Ok(()),
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string())),
    }
}

fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os("T5LAB_OUTPUT_DIR").map_or_else(|| PathBuf::from("t5lab-out"), PathBuf::from);
    root.join(command)
}

fn start<S: Settings>(command: &str, common: &Common, flags: &impl Serialize, exec: Exec<S>) -> Result<()> {
    set_threads(common.threads)?;
    let file = common.config.as_deref().map(|p| read_config(p, command)).transpose()?;
    let flags = match serde_json::to_value(flags).expect("flags serialize") {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    let mut s: S = settings::merge(file, flags)?;
    resolve_paths(&mut s)?;
    let out = common.out.clone().unwrap_or_else(|| default_out(command));
    execute(command, s, &out, exec)
}

fn execute<S: Settings>(command: &str, s: S, out: &Path, exec: Exec<S>) -> Result<()> {
    let mut rec = Recorder::new(out)?;
    exec(&s, &mut rec)?;
    rec.finish(command, serde_json::to_value(&s).expect("settings serialize"))?;
    Ok(())
}

fn replay<S: Settings>(command: &str, settings: Value, out: &Path, exec: Exec<S>) -> Result<()> {
    let mut s: S = settings::from_value(settings)?;
    resolve_paths(&mut s)?;
    execute(command, s, out, exec)
}

fn rerun(a: RerunArgs) -> Result<()> {
    set_threads(a.threads)?;
    let m = Manifest::load(&a.manifest)?;
    m.check_replayable()?;
    let (c, s, out) = (m.command.as_str(), m.settings, a.out.as_path());
    match c {
        "vocab-train" => replay(c, s, out, train::vocab_train),
        "pretrain" => replay(c, s, out, train::pretrain),
        "finetune" => replay(c, s, out, train::finetune),
        "generate" => replay(c, s, out, eval::generate),
        "eval-rouge" => replay(c, s, out, eval::eval_rouge),
        "eval-ner" => replay(c, s, out, eval::eval_ner),
        "mds-extract" => replay(c, s, out, mds::extract),
        "mds-abstract" => replay(c, s, out, mds::abstractive),
        "stats" => replay(c, s, out, eval::stats),
        other => Err(CliError::Manifest(format!("unknown command {other:?}"))),
    }
}

/// A required path after [`resolve_paths`] has run.
fn required<'a>(value: &'a Option<String>, name: &str) -> Result<&'a str> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required setting `{name}`")))
}

fn load_vocab(rec: &mut Recorder, path: &Option<String>) -> Result<Vocabulary> {
    Ok(Vocabulary::load(&rec.input(required(path, "vocab")?)?)?)
}

fn load_checkpoint(rec: &mut Recorder, path: &Option<String>) -> Result<Checkpoint> {
    Ok(Checkpoint::load(&rec.input(required(path, "ckpt")?)?)?)
}

/// Loads a checkpoint for inference and checks it matches the vocabulary.
fn load_model(rec: &mut Recorder, ckpt: &Option<String>, vocab: &Vocabulary) -> Result<InferenceModel> {
    let ck = load_checkpoint(rec, ckpt)?;
    let v = ck.params.config().vocab_size;
    if v != vocab.size() as usize {
        return Err(CliError::Config(format!(
            "checkpoint vocab_size {v} does not match the vocabulary's {}",
            vocab.size()
        )));
    }
    Ok(InferenceModel::new(&ck.params))
}
