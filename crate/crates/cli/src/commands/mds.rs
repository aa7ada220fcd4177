use serde::Serialize;
use t5lab::mds::{
    abstractive_summarize, evaluate_cluster, extractive_summarize, read_clusters_jsonl, ExtractOptions, Selected,
};
use t5lab::metrics::{score_multi, RougeTriple};

use super::{load_model, load_vocab, required};
use crate::error::Result;
use crate::manifest::Recorder;
use crate::settings::{decode_config, Mds};

#[derive(Serialize)]
struct Extracted {
    id: String,
    k: usize,
    clamped: bool,
    token_len: usize,
    context: String,
    ranked: Vec<Selected>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rouge: Option<RougeTriple>,
}

#[derive(Serialize)]
struct Summarized {
    id: String,
    context: String,
    summary: String,
    truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    extractive: Option<RougeTriple>,
    #[serde(skip_serializing_if = "Option::is_none")]
    abstractive: Option<RougeTriple>,
}

/// Means over the clusters that have references.
#[derive(Serialize)]
struct MdsReport {
    clusters: usize,
    scored: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    truncated: Option<usize>,
    extractive: Option<RougeTriple>,
    #[serde(skip_serializing_if = "Option::is_none")]
    abstractive: Option<RougeTriple>,
}

fn options(s: &Mds) -> ExtractOptions {
    ExtractOptions {
        k: s.k,
        mode: s.mode,
        metric: s.metric,
    }
}

pub fn extract(s: &Mds, rec: &mut Recorder) -> Result<()> {
    let clusters = read_clusters_jsonl(&rec.input(required(&s.clusters, "clusters")?)?)?;
    let vocab = load_vocab(rec, &s.vocab)?;
    let model = load_model(rec, &s.ckpt, &vocab)?;
    let mut rows = Vec::new();
    for c in &clusters {
        let ctx = extractive_summarize(&model, &vocab, c, &options(s))?;
        let rouge = if c.references.is_empty() {
            None
        } else {
            Some(score_multi(&ctx.text(), &c.references, s.multi_ref)?)
        };
        rows.push(Extracted {
            id: c.id.clone(),
            k: ctx.k,
            clamped: ctx.clamped,
            token_len: ctx.token_len,
            context: ctx.text(),
            ranked: ctx.ranked,
            rouge,
        });
    }
    let scores: Vec<RougeTriple> = rows.iter().filter_map(|r| r.rouge).collect();
    let report = MdsReport {
        clusters: rows.len(),
        scored: scores.len(),
        truncated: None,
        extractive: RougeTriple::mean(&scores),
        abstractive: None,
    };
    rec.write_jsonl("extractive.jsonl", &rows)?;
    let path = rec.write_json("report.json", &report)?;
    println!("mds-extract: {} clusters, {} scored -> {}", report.clusters, report.scored, path.display());
    Ok(())
}

pub fn abstractive(s: &Mds, rec: &mut Recorder) -> Result<()> {
    let clusters = read_clusters_jsonl(&rec.input(required(&s.clusters, "clusters")?)?)?;
    let vocab = load_vocab(rec, &s.vocab)?;
    let model = load_model(rec, &s.ckpt, &vocab)?;
    let decode = decode_config(s.beam, s.max_len, s.length_penalty, model.config());
    let mut rows = Vec::new();
    for c in &clusters {
        rows.push(if c.references.is_empty() {
            let ctx = extractive_summarize(&model, &vocab, c, &options(s))?;
            let summary = abstractive_summarize(&model, &vocab, &ctx, &decode)?;
            Summarized {
                id: c.id.clone(),
                context: ctx.text(),
                summary: summary.text,
                truncated: summary.truncated,
                extractive: None,
                abstractive: None,
            }
        } else {
            let r = evaluate_cluster(&model, &vocab, c, &options(s), &decode, s.multi_ref)?;
            Summarized {
                id: r.id,
                context: r.context,
                summary: r.summary,
                truncated: r.truncated,
                extractive: Some(r.extractive),
                abstractive: Some(r.abstractive),
            }
        });
    }
    let ext: Vec<RougeTriple> = rows.iter().filter_map(|r| r.extractive).collect();
    let abs: Vec<RougeTriple> = rows.iter().filter_map(|r| r.abstractive).collect();
    let report = MdsReport {
        clusters: rows.len(),
        scored: ext.len(),
        truncated: Some(rows.iter().filter(|r| r.truncated).count()),
        extractive: RougeTriple::mean(&ext),
        abstractive: RougeTriple::mean(&abs),
    };
    rec.write_jsonl("summaries.jsonl", &rows)?;
    let path = rec.write_json("report.json", &report)?;
    println!("mds-abstract: {} clusters, {} scored -> {}", report.clusters, report.scored, path.display());
    Ok(())
}
