//! ROUGE-N, ROUGE-L and span-level micro F1.
//!
//! Scores are computed on [`score_tokens`] output: lowercased,
//! whitespace-split, with tokens that hold no letter or digit dropped.

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ner::EntitySpan;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot score an empty list of pairs")]
    EmptyCorpus,
    #[error("rouge n must be at least 1")]
    ZeroN,
    #[error("{gold} gold sentences but {pred} predicted")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("sentence {sentence}: span {span} has start >= end")]
    EmptySpan { sentence: usize, span: EntitySpan },
    #[error("sentence {sentence}: gold spans {a} and {b} overlap")]
    OverlappingGold {
        sentence: usize,
        a: EntitySpan,
        b: EntitySpan,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self::from_pr(ratio(overlap, candidate_total), ratio(overlap, reference_total))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    fn zip(self, other: Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            precision: f(self.precision, other.precision),
            recall: f(self.recall, other.recall),
            f1: f(self.f1, other.f1),
        }
    }
}

/// Lowercase, split on whitespace, drop pure-punctuation tokens.
pub fn score_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram overlap. A sequence shorter than `n` has no n-grams, so a
/// short reference scores zero; [`CorpusRouge::short_references`] counts
/// those cases.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<RougeScore, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroN);
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: usize = refs.iter().map(|(g, &c)| c.min(cand.get(g).copied().unwrap_or(0))).sum();
    let total = |len: usize| (len + 1).saturating_sub(n);
    Ok(RougeScore::from_counts(overlap, total(candidate.len()), total(reference.len())))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeTriple {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
}

impl RougeTriple {
    fn zip(self, other: Self, f: impl Fn(f64, f64) -> f64 + Copy) -> Self {
        Self {
            rouge1: self.rouge1.zip(other.rouge1, f),
            rouge2: self.rouge2.zip(other.rouge2, f),
            rouge_l: self.rouge_l.zip(other.rouge_l, f),
        }
    }

    fn scale(self, k: f64) -> Self {
        self.zip(self, |a, _| a * k)
    }

    /// Field-wise mean, summed in order. `None` for an empty slice.
    pub fn mean(scores: &[RougeTriple]) -> Option<RougeTriple> {
        let total = scores.iter().copied().reduce(|a, b| a.zip(b, |x, y| x + y))?;
        Some(total.scale(1.0 / scores.len() as f64))
    }
}

/// Scores a pre-tokenized pair.
pub fn score_tokens_pair<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeTriple {
    RougeTriple {
        rouge1: rouge_n(candidate, reference, 1).expect("n = 1"),
        rouge2: rouge_n(candidate, reference, 2).expect("n = 2"),
        rouge_l: rouge_l(candidate, reference),
    }
}

pub fn score_pair(candidate: &str, reference: &str) -> RougeTriple {
    score_tokens_pair(&score_tokens(candidate), &score_tokens(reference))
}

/// How scores against several references are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiRef {
    /// Per metric and per field, the best value over references.
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for MultiRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max" => Ok(MultiRef::Max),
            "mean" => Ok(MultiRef::Mean),
            _ => Err(format!("unknown multi-reference mode {s:?} (expected max or mean)")),
        }
    }
}

pub fn score_multi(candidate: &str, references: &[String], mode: MultiRef) -> Result<RougeTriple, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let cand = score_tokens(candidate);
    let scores = references.iter().map(|r| score_tokens_pair(&cand, &score_tokens(r)));
    Ok(match mode {
        MultiRef::Max => scores.reduce(|a, b| a.zip(b, f64::max)).unwrap(),
        MultiRef::Mean => scores
            .reduce(|a, b| a.zip(b, |x, y| x + y))
            .unwrap()
            .scale(1.0 / references.len() as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRouge {
    #[serde(flatten)]
    pub mean: RougeTriple,
    pub pairs: usize,
    /// Pairs whose reference has fewer than two scoring tokens, so ROUGE-2
    /// is zero by definition.
    pub short_references: usize,
}

/// Unweighted mean over pairs of per-pair precision, recall and F1.
pub fn corpus_rouge(pairs: &[(String, String)]) -> Result<CorpusRouge, MetricsError> {
    corpus_rouge_multi(
        &pairs.iter().map(|(c, r)| (c.clone(), vec![r.clone()])).collect::<Vec<_>>(),
        MultiRef::Max,
    )
}

pub fn corpus_rouge_multi(pairs: &[(String, Vec<String>)], mode: MultiRef) -> Result<CorpusRouge, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let scored: Vec<(RougeTriple, bool)> = pairs
        .par_iter()
        .map(|(c, refs)| {
            let short = refs.iter().any(|r| score_tokens(r).len() < 2);
            Ok((score_multi(c, refs, mode)?, short))
        })
        .collect::<Result<_, MetricsError>>()?;
    let triples: Vec<RougeTriple> = scored.iter().map(|(s, _)| *s).collect();
    Ok(CorpusRouge {
        mean: RougeTriple::mean(&triples).expect("non-empty"),
        pairs: pairs.len(),
        short_references: scored.iter().filter(|(_, s)| *s).count(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
}

impl F1Report {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let s = RougeScore::from_counts(tp, tp + fp, tp + fn_);
        Self {
            tp,
            fp,
            fn_,
            precision: s.precision,
            recall: s.recall,
            micro_f1: s.f1,
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// Rejects empty spans and overlapping pairs within one sentence.
pub fn validate_spans(sentence: usize, spans: &[EntitySpan]) -> Result<(), MetricsError> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    if let Some(s) = sorted.iter().find(|s| s.start >= s.end) {
        return Err(MetricsError::EmptySpan {
            sentence,
            span: (*s).clone(),
        });
    }
    sorted.sort_by_key(|s| (s.start, s.end));
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(MetricsError::OverlappingGold {
                sentence,
                a: w[0].clone(),
                b: w[1].clone(),
            });
        }
    }
    Ok(())
}

/// (tp, fp, fn) for one sentence under exact (start, end, label) matching.
pub fn sentence_counts(gold: &[EntitySpan], pred: &[EntitySpan]) -> (usize, usize, usize) {
    let mut remaining: HashMap<&EntitySpan, usize> = HashMap::new();
    for g in gold {
        *remaining.entry(g).or_insert(0) += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(c) = remaining.get_mut(p).filter(|c| **c > 0) {
            *c -= 1;
            tp += 1;
        }
    }
    (tp, pred.len() - tp, gold.len() - tp)
}

/// Counts pooled over every sentence before precision, recall and F1 are
/// computed.
pub fn micro_f1(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> Result<F1Report, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        validate_spans(i, g)?;
        let (a, b, c) = sentence_counts(g, p);
        tp += a;
        fp += b;
        fn_ += c;
    }
    Ok(F1Report::from_counts(tp, fp, fn_))
}
