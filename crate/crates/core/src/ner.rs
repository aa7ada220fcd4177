//! NER as text-to-text generation.
//!
//! Entities are written inline: `benh nhan <PATIENT_ID> 52 </PATIENT_ID>`.
//! [`insert_tags`] builds such targets, [`parse_tags`] reads them back from
//! (possibly malformed) generated text, and [`evaluate_ner`] scores a tagger
//! against gold spans.

use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::generation::{generate, DecodeConfig, GenerationError};
use crate::metrics::{sentence_counts, validate_spans, F1Report, MetricsError};
use crate::model::InferenceModel;
use crate::tokenizer::{TokenizerError, Vocabulary};
use crate::training::encoder_input;

#[derive(Debug, thiserror::Error)]
pub enum NerError {
    #[error("label {0:?} is not upper-snake case")]
    BadLabel(String),
    #[error("token {index} ({token:?}) is empty, contains whitespace or reads as a tag")]
    BadToken { index: usize, token: String },
    #[error("span {span} does not fit a sentence of {len} tokens")]
    OutOfRange { span: EntitySpan, len: usize },
    #[error(transparent)]
    Spans(#[from] MetricsError),
    #[error("line {line}: {msg}")]
    Json { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Half-open token range `[start, end)` with a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize, String)", into = "(usize, usize, String)")]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: label.into(),
        }
    }
}

impl From<(usize, usize, String)> for EntitySpan {
    fn from((start, end, label): (usize, usize, String)) -> Self {
        Self { start, end, label }
    }
}

impl From<EntitySpan> for (usize, usize, String) {
    fn from(s: EntitySpan) -> Self {
        (s.start, s.end, s.label)
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.start, self.end, self.label)
    }
}

pub fn is_valid_label(label: &str) -> bool {
    let mut chars = label.chars();
    matches!(chars.next(), Some('A'..='Z'))
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

pub fn open_tag(label: &str) -> String {
    format!("<{label}>")
}

pub fn close_tag(label: &str) -> String {
    format!("</{label}>")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagKind {
    Open,
    Close,
}

/// Reads `<X>` / `</X>` where `X` is upper-snake.
fn as_tag(token: &str) -> Option<(TagKind, &str)> {
    let inner = token.strip_prefix('<')?.strip_suffix('>')?;
    let (kind, label) = match inner.strip_prefix('/') {
        Some(l) => (TagKind::Close, l),
        None => (TagKind::Open, inner),
    };
    is_valid_label(label).then_some((kind, label))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSet(BTreeSet<String>);

impl LabelSet {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Result<Self, NerError> {
        let mut set = BTreeSet::new();
        for l in labels {
            let l = l.into();
            if !is_valid_label(&l) {
                return Err(NerError::BadLabel(l));
            }
            set.insert(l);
        }
        Ok(Self(set))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.contains(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Open and close markers for every label, for use as atomic
    /// tokenizer pieces.
    pub fn tag_pieces(&self) -> Vec<String> {
        self.iter().flat_map(|l| [open_tag(l), close_tag(l)]).collect()
    }
}

/// Tokens with tag markers interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedText(pub Vec<String>);

impl fmt::Display for TaggedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

pub fn insert_tags<S: AsRef<str>>(tokens: &[S], spans: &[EntitySpan]) -> Result<TaggedText, NerError> {
    for (index, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if t.is_empty() || t.chars().any(char::is_whitespace) || as_tag(t).is_some() {
            return Err(NerError::BadToken {
                index,
                token: t.to_string(),
            });
        }
    }
    for s in spans {
        if !is_valid_label(&s.label) {
            return Err(NerError::BadLabel(s.label.clone()));
        }
        if s.end > tokens.len() {
            return Err(NerError::OutOfRange {
                span: s.clone(),
                len: tokens.len(),
            });
        }
    }
    validate_spans(0, spans)?;
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| s.start);
    let mut out = Vec::with_capacity(tokens.len() + 2 * spans.len());
    let mut next = sorted.iter().peekable();
    let mut open: Option<&EntitySpan> = None;
    for (i, t) in tokens.iter().enumerate() {
        if let Some(s) = next.next_if(|s| s.start == i) {
            out.push(open_tag(&s.label));
            open = Some(s);
        }
        out.push(t.as_ref().to_string());
        if let Some(s) = open.filter(|s| s.end == i + 1) {
            out.push(close_tag(&s.label));
            open = None;
        }
    }
    Ok(TaggedText(out))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// Open tag never closed; the span runs to the end of the text.
    Unclosed { label: String, start: usize },
    /// Close tag with no open span; dropped.
    UnopenedClose { label: String, position: usize },
    /// Tag-shaped token whose label is not in the label set; kept as text.
    UnknownLabel { token: String },
    /// Open tag while another span was open; the first span ends here.
    NestedOpen { outer: String, inner: String, position: usize },
    /// Close tag naming a different label than the open span; it closes
    /// the open span anyway.
    MismatchedClose { open: String, close: String, position: usize },
    /// A tag pair around no tokens; no span is produced.
    EmptySpan { label: String, position: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedTags {
    pub tokens: Vec<String>,
    pub spans: Vec<EntitySpan>,
    pub warnings: Vec<ParseWarning>,
}

/// Inverse of [`insert_tags`]. Total: malformed input is repaired and every
/// repair is reported. Repairs only drop markers; they never add tokens.
pub fn parse_tags(text: &str, labels: &LabelSet) -> ParsedTags {
    let mut out = ParsedTags::default();
    let mut open: Option<(String, usize)> = None;
    let finish = |out: &mut ParsedTags, label: String, start: usize| {
        let end = out.tokens.len();
        if start < end {
            out.spans.push(EntitySpan::new(start, end, label));
        } else {
            out.warnings.push(ParseWarning::EmptySpan { label, position: end });
        }
    };
    for tok in text.split_whitespace() {
        let pos = out.tokens.len();
        match as_tag(tok) {
            Some((_, label)) if !labels.contains(label) => {
                out.warnings.push(ParseWarning::UnknownLabel { token: tok.to_string() });
                out.tokens.push(tok.to_string());
            }
            Some((TagKind::Open, label)) => {
                if let Some((outer, start)) = open.take() {
                    out.warnings.push(ParseWarning::NestedOpen {
                        outer: outer.clone(),
                        inner: label.to_string(),
                        position: pos,
                    });
                    finish(&mut out, outer, start);
                }
                open = Some((label.to_string(), pos));
            }
            Some((TagKind::Close, label)) => match open.take() {
                Some((open_label, start)) => {
                    if open_label != label {
                        out.warnings.push(ParseWarning::MismatchedClose {
                            open: open_label.clone(),
                            close: label.to_string(),
                            position: pos,
                        });
                    }
                    finish(&mut out, open_label, start);
                }
                None => out.warnings.push(ParseWarning::UnopenedClose {
                    label: label.to_string(),
                    position: pos,
                }),
            },
            None => out.tokens.push(tok.to_string()),
        }
    }
    if let Some((label, start)) = open {
        out.warnings.push(ParseWarning::Unclosed {
            label: label.clone(),
            start,
        });
        finish(&mut out, label, start);
    }
    out
}

/// One NER example: `{"tokens": [...], "spans": [[start, end, "LABEL"], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerSentence {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub spans: Vec<EntitySpan>,
}

impl NerSentence {
    pub fn tagged(&self) -> Result<TaggedText, NerError> {
        insert_tags(&self.tokens, &self.spans)
    }
}

pub fn parse_ner_jsonl(reader: impl BufRead) -> Result<Vec<NerSentence>, NerError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: NerSentence = serde_json::from_str(&line).map_err(|e| NerError::Json {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn read_ner_jsonl(path: &Path) -> Result<Vec<NerSentence>, NerError> {
    parse_ner_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Labels used anywhere in a dataset.
pub fn dataset_labels(data: &[NerSentence]) -> Result<LabelSet, NerError> {
    LabelSet::new(data.iter().flat_map(|s| s.spans.iter().map(|sp| sp.label.clone())))
}

/// Produces tagged text for a sentence.
pub trait Tagger: Sync {
    fn tag(&self, tokens: &[String]) -> Result<String, NerError>;
}

/// Generates tagged text with a trained model. The vocabulary should carry
/// the tag markers as user pieces.
pub struct ModelTagger<'a> {
    pub model: &'a InferenceModel,
    pub vocab: &'a Vocabulary,
    pub decode: DecodeConfig,
}

impl Tagger for ModelTagger<'_> {
    fn tag(&self, tokens: &[String]) -> Result<String, NerError> {
        let ids = self.vocab.encode(&tokens.join(" ")).ids;
        let input = encoder_input(&ids, self.model.config().max_input_len);
        let out = generate(self.model, &input, &self.decode)?;
        Ok(self.vocab.decode(&out.ids)?)
    }
}

/// For each generated token, the source index it aligns to under a longest
/// common subsequence alignment.
pub fn lcs_alignment<S: AsRef<str>, T: AsRef<str>>(generated: &[S], source: &[T]) -> Vec<Option<usize>> {
    let (n, m) = (generated.len(), source.len());
    let mut dp = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[at(i, j)] = if generated[i].as_ref() == source[j].as_ref() {
                dp[at(i + 1, j + 1)] + 1
            } else {
                dp[at(i + 1, j)].max(dp[at(i, j + 1)])
            };
        }
    }
    let mut map = vec![None; n];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if generated[i].as_ref() == source[j].as_ref() && dp[at(i, j)] == dp[at(i + 1, j + 1)] + 1 {
            map[i] = Some(j);
            i += 1;
            j += 1;
        } else if dp[at(i + 1, j)] >= dp[at(i, j + 1)] {
            i += 1;
        } else {
            j += 1;
        }
    }
    map
}

/// Maps a span over generated tokens onto source tokens. Every covered
/// token must align, to consecutive source positions.
pub fn align_span(span: &EntitySpan, map: &[Option<usize>]) -> Option<EntitySpan> {
    let first = map.get(span.start).copied().flatten()?;
    for (k, i) in (span.start..span.end).enumerate() {
        if map.get(i).copied().flatten()? != first + k {
            return None;
        }
    }
    Some(EntitySpan::new(first, first + (span.end - span.start), span.label.clone()))
}

/// Counts for one sentence: aligned spans are matched exactly against gold,
/// unalignable ones are false positives.
pub fn score_generated(gold: &NerSentence, generated: &str, labels: &LabelSet) -> F1Report {
    let parsed = parse_tags(generated, labels);
    let map = lcs_alignment(&parsed.tokens, &gold.tokens);
    let mut aligned = Vec::new();
    let mut unaligned = 0;
    for s in &parsed.spans {
        match align_span(s, &map) {
            Some(a) => aligned.push(a),
            None => unaligned += 1,
        }
    }
    let (tp, fp, fn_) = sentence_counts(&gold.spans, &aligned);
    F1Report::from_counts(tp, fp + unaligned, fn_)
}

/// Tags every sentence, parses the output and pools counts over the corpus.
pub fn evaluate_ner(tagger: &dyn Tagger, data: &[NerSentence], labels: &LabelSet) -> Result<F1Report, NerError> {
    for (i, s) in data.iter().enumerate() {
        validate_spans(i, &s.spans)?;
    }
    let reports: Vec<F1Report> = data
        .par_iter()
        .map(|s| Ok(score_generated(s, &tagger.tag(&s.tokens)?, labels)))
        .collect::<Result<_, NerError>>()?;
    Ok(reports.into_iter().fold(F1Report::default(), F1Report::merge))
}
