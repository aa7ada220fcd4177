//! Bi-encoder multi-document summarization.
//!
//! Every sentence of a cluster is embedded by mean-pooling encoder states.
//! Sentences are ranked against a query vector (the embedded references, or
//! the centroid of all sentences), the top K are concatenated in source
//! order, and the concatenation is re-encoded and decoded into an
//! abstractive summary.

use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::split_sentences;
use crate::generation::{generate, DecodeConfig, GenerationError};
use crate::metrics::{score_multi, MetricsError, MultiRef, RougeTriple};
use crate::model::{InferenceModel, ModelError};
use crate::tokenizer::{TokenizerError, Vocabulary};
use crate::training::encoder_input;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum MdsError {
    #[error("cluster {0:?} has no documents")]
    NoDocuments(String),
    #[error("cluster {0:?} has no sentences")]
    NoSentences(String),
    #[error("sentence {at:?} encodes to no tokens")]
    EmptySentence { at: (usize, usize) },
    #[error("cannot compare a zero vector")]
    ZeroVector,
    #[error("vectors of length {0} and {1}")]
    DimMismatch(usize, usize),
    #[error("reference mode needs references, cluster {0:?} has none")]
    MissingReferences(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("the extractive context is empty")]
    EmptyContext,
    #[error("line {line}: {msg}")]
    Json { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// `{"id", "documents": [...], "references": [...]}`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentCluster {
    pub id: String,
    pub documents: Vec<String>,
    #[serde(default)]
    pub references: Vec<String>,
}

impl DocumentCluster {
    /// Sentences of every document in source order, tagged with
    /// `(document index, sentence index)`.
    pub fn sentences(&self) -> Vec<((usize, usize), String)> {
        self.documents
            .iter()
            .enumerate()
            .flat_map(|(d, doc)| split_sentences(doc).into_iter().enumerate().map(move |(s, t)| ((d, s), t)))
            .collect()
    }
}

pub fn parse_clusters_jsonl(reader: impl BufRead) -> Result<Vec<DocumentCluster>, MdsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MdsError::Json {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_clusters_jsonl(path: &Path) -> Result<Vec<DocumentCluster>, MdsError> {
    parse_clusters_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub text: String,
    pub vector: Vec<f64>,
    pub source: (usize, usize),
}

/// Mean of the encoder's final states over the ids (no eos appended),
/// truncated to the model's input length.
pub fn embed_ids(model: &InferenceModel, ids: &[u32]) -> Result<Vec<f64>, MdsError> {
    let ids = &ids[..ids.len().min(model.config().max_input_len)];
    Ok(embed_batch(model, &[ids.to_vec()])?.pop().expect("one row"))
}

/// Mean-pooled embeddings of a padded batch; padding never reaches the mean.
pub fn embed_batch(model: &InferenceModel, batch: &[Vec<u32>]) -> Result<Vec<Vec<f64>>, MdsError> {
    let (states, lens) = model.encoder_states(batch)?;
    let (t, d) = (states.shape()[1], states.shape()[2]);
    let data = states.data();
    Ok(lens
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let mut v = vec![0.0; d];
            for i in 0..len {
                for (x, s) in v.iter_mut().zip(&data[(b * t + i) * d..(b * t + i + 1) * d]) {
                    *x += s;
                }
            }
            v.iter().map(|x| x / len as f64).collect()
        })
        .collect())
}

pub fn embed_sentence(model: &InferenceModel, vocab: &Vocabulary, sentence: &str) -> Result<Vec<f64>, MdsError> {
    let ids = vocab.encode(sentence).ids;
    if ids.is_empty() {
        return Err(MdsError::EmptySentence { at: (0, 0) });
    }
    embed_ids(model, &ids)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, MdsError> {
    if u.len() != v.len() {
        return Err(MdsError::DimMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(MdsError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Similarity used for ranking; distances are negated so larger is closer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Manhattan,
    Euclidean,
}

impl Metric {
    pub fn similarity(self, u: &[f64], v: &[f64]) -> Result<f64, MdsError> {
        if u.len() != v.len() {
            return Err(MdsError::DimMismatch(u.len(), v.len()));
        }
        let diffs = u.iter().zip(v).map(|(a, b)| a - b);
        Ok(match self {
            Metric::Cosine => cosine_similarity(u, v)?,
            Metric::Manhattan => -diffs.map(f64::abs).sum::<f64>(),
            Metric::Euclidean => -diffs.map(|x| x * x).sum::<f64>().sqrt(),
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "manhattan" => Ok(Metric::Manhattan),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(format!("unknown metric {s:?} (expected cosine, manhattan or euclidean)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Rank against the embedded references (best match over references).
    #[default]
    Reference,
    /// Rank against the mean of all sentence embeddings; needs no references.
    Centroid,
}

impl std::str::FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reference" => Ok(QueryMode::Reference),
            "centroid" => Ok(QueryMode::Centroid),
            _ => Err(format!("unknown query mode {s:?} (expected reference or centroid)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub source: (usize, usize),
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractiveContext {
    pub k: usize,
    /// `k` exceeded the number of sentences.
    pub clamped: bool,
    /// Selected sentences by rank; scores are non-increasing.
    pub ranked: Vec<Selected>,
    /// The same sentences in source order.
    pub sentences: Vec<Selected>,
    /// Token count of the concatenated text (0 until a vocabulary sees it).
    pub token_len: usize,
}

impl ExtractiveContext {
    pub fn text(&self) -> String {
        self.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Scores every embedding against `query` (best over several queries) and
/// keeps the `k` best. Ties go to the earlier `(document, sentence)` source.
pub fn select_top_k(
    embeddings: &[SentenceEmbedding],
    queries: &[Vec<f64>],
    k: usize,
    metric: Metric,
) -> Result<ExtractiveContext, MdsError> {
    if k == 0 {
        return Err(MdsError::ZeroK);
    }
    if embeddings.is_empty() {
        return Err(MdsError::EmptyContext);
    }
    let mut scored = embeddings
        .iter()
        .map(|e| {
            let mut best = f64::NEG_INFINITY;
            for q in queries {
                best = best.max(metric.similarity(&e.vector, q)?);
            }
            Ok(Selected {
                source: e.source,
                // -0.0 would sort below 0.0 under total_cmp and split a tie
                score: best + 0.0,
                text: e.text.clone(),
            })
        })
        .collect::<Result<Vec<_>, MdsError>>()?;
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.source.cmp(&b.source)));
    let clamped = k > scored.len();
    scored.truncate(k);
    let mut sentences = scored.clone();
    sentences.sort_by_key(|s| s.source);
    Ok(ExtractiveContext {
        k,
        clamped,
        ranked: scored,
        sentences,
        token_len: 0,
    })
}

/// Embeds every sentence of a cluster, in parallel.
pub fn embed_cluster(
    model: &InferenceModel,
    vocab: &Vocabulary,
    cluster: &DocumentCluster,
) -> Result<Vec<SentenceEmbedding>, MdsError> {
    if cluster.documents.is_empty() {
        return Err(MdsError::NoDocuments(cluster.id.clone()));
    }
    let sentences = cluster.sentences();
    if sentences.is_empty() {
        return Err(MdsError::NoSentences(cluster.id.clone()));
    }
    sentences
        .into_par_iter()
        .map(|(source, text)| {
            let ids = vocab.encode(&text).ids;
            if ids.is_empty() {
                return Err(MdsError::EmptySentence { at: source });
            }
            Ok(SentenceEmbedding {
                vector: embed_ids(model, &ids)?,
                text,
                source,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub k: usize,
    pub mode: QueryMode,
    pub metric: Metric,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            mode: QueryMode::Reference,
            metric: Metric::Cosine,
        }
    }
}

pub fn extractive_summarize(
    model: &InferenceModel,
    vocab: &Vocabulary,
    cluster: &DocumentCluster,
    opts: &ExtractOptions,
) -> Result<ExtractiveContext, MdsError> {
    if opts.mode == QueryMode::Reference && cluster.references.is_empty() {
        return Err(MdsError::MissingReferences(cluster.id.clone()));
    }
    let embeddings = embed_cluster(model, vocab, cluster)?;
    let queries = match opts.mode {
        QueryMode::Reference => cluster
            .references
            .iter()
            .map(|r| embed_sentence(model, vocab, r))
            .collect::<Result<Vec<_>, _>>()?,
        QueryMode::Centroid => {
            let d = embeddings[0].vector.len();
            let mut c = vec![0.0; d];
            // summed in source order so the centroid is independent of
            // thread scheduling
            for e in &embeddings {
                for (x, v) in c.iter_mut().zip(&e.vector) {
                    *x += v;
                }
            }
            vec![c.iter().map(|x| x / embeddings.len() as f64).collect()]
        }
    };
    let mut ctx = select_top_k(&embeddings, &queries, opts.k, opts.metric)?;
    ctx.token_len = vocab.encode(&ctx.text()).ids.len();
    Ok(ctx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractiveSummary {
    pub text: String,
    /// The context was cut to fit the encoder.
    pub truncated: bool,
}

/// Re-encodes the context text and hands the (possibly truncated) ids to
/// `decode`, which returns generated ids.
pub fn abstractive_summarize_with(
    vocab: &Vocabulary,
    context: &ExtractiveContext,
    max_input_len: usize,
    decode: impl FnOnce(&[u32]) -> Result<Vec<u32>, MdsError>,
) -> Result<AbstractiveSummary, MdsError> {
    let ids = vocab.encode(&context.text()).ids;
    if context.sentences.is_empty() || ids.is_empty() {
        return Err(MdsError::EmptyContext);
    }
    let truncated = ids.len() + 1 > max_input_len;
    let input = encoder_input(&ids, max_input_len);
    let out = decode(&input)?;
    Ok(AbstractiveSummary {
        text: vocab.decode(&out)?,
        truncated,
    })
}

pub fn abstractive_summarize(
    model: &InferenceModel,
    vocab: &Vocabulary,
    context: &ExtractiveContext,
    cfg: &DecodeConfig,
) -> Result<AbstractiveSummary, MdsError> {
    abstractive_summarize_with(vocab, context, model.config().max_input_len, |ids| {
        Ok(generate(model, ids, cfg)?.ids)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub id: String,
    pub extractive: RougeTriple,
    pub abstractive: RougeTriple,
    pub context: String,
    pub summary: String,
    pub truncated: bool,
}

pub fn evaluate_cluster(
    model: &InferenceModel,
    vocab: &Vocabulary,
    cluster: &DocumentCluster,
    opts: &ExtractOptions,
    decode: &DecodeConfig,
    multi_ref: MultiRef,
) -> Result<ClusterReport, MdsError> {
    if cluster.references.is_empty() {
        return Err(MdsError::MissingReferences(cluster.id.clone()));
    }
    let ctx = extractive_summarize(model, vocab, cluster, opts)?;
    let summary = abstractive_summarize(model, vocab, &ctx, decode)?;
    let context = ctx.text();
    Ok(ClusterReport {
        id: cluster.id.clone(),
        extractive: score_multi(&context, &cluster.references, multi_ref)?,
        abstractive: score_multi(&summary.text, &cluster.references, multi_ref)?,
        context,
        summary: summary.text,
        truncated: summary.truncated,
    })
}
