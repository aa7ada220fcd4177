//! Normalization, sentence segmentation, length bucketing, dataset splits and
//! JSONL ingestion.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("split fractions must lie in [0,1] and sum to 1 (got {train}, {dev}, {test})")]
    BadSplit { train: f64, dev: f64, test: f64 },
    #[error("line {line}: {msg}")]
    Json { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CorpusError {
    fn from(e: std::io::Error) -> Self {
        CorpusError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r#abstract: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            body: body.into(),
            r#abstract: None,
        }
    }

    pub fn with_abstract(mut self, summary: impl Into<String>) -> Self {
        self.r#abstract = Some(summary.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizeOptions {
    pub fold_case: bool,
    pub split_numbers: bool,
    pub normalize_punct: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            fold_case: true,
            split_numbers: true,
            normalize_punct: true,
        }
    }
}

fn punct_replacement(c: char) -> Option<&'static str> {
    Some(match c {
        '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' => "'",
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{00AB}' | '\u{00BB}' | '\u{2033}' => "\"",
        '\u{2026}' => "...",
        '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}' | '\u{2015}' | '\u{2212}' => "-",
        _ => return None,
    })
}

fn is_digit(c: char) -> bool {
    c.is_numeric()
}

fn is_letter(c: char) -> bool {
    c.is_alphabetic() && !c.is_numeric()
}

/// Total and idempotent; output is NFC.
pub fn normalize_text(raw: &str, opts: NormalizeOptions) -> String {
    let mut s: String = raw.nfc().collect();
    if opts.normalize_punct {
        let mut out = String::with_capacity(s.len());
        for c in s.chars() {
            match punct_replacement(c) {
                Some(r) => out.push_str(r),
                None => out.push(c),
            }
        }
        s = out;
    }
    if opts.fold_case {
        s = s.to_lowercase().nfc().collect();
    }
    if opts.split_numbers {
        let mut out = String::with_capacity(s.len() + 8);
        let mut prev: Option<char> = None;
        for c in s.chars() {
            if let Some(p) = prev {
                if (is_digit(p) && is_letter(c)) || (is_letter(p) && is_digit(c)) {
                    out.push(' ');
                }
            }
            out.push(c);
            prev = Some(c);
        }
        s = out.nfc().collect();
    }
    s
}

/// Lowercased abbreviations (without the final period) that do not end a
/// sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "vs", "e.g", "i.e", "cf", "fig", "vol", "approx",
    "dept", "inc", "ltd", "gen", "col", "lt", "sgt", "rev", "hon", "tp", "gs", "pgs", "ts", "ths", "bs",
    "pgs.ts", "gs.ts", "ths.bs", "ts.bs",
];

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '\u{2026}')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '}' | '\u{201D}' | '\u{2019}' | '\u{00BB}')
}

/// Rule-based splitter: a sentence ends after a run of terminal punctuation
/// (plus any closing quotes or brackets) that is followed by whitespace or
/// the end of text, unless the word before a single period is a known
/// abbreviation. Blank lines always end a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    let push = |sentences: &mut Vec<String>, from: usize, to: usize| {
        let s: String = chars[from..to].iter().collect();
        let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
        if !s.is_empty() {
            sentences.push(s);
        }
    };
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            let mut j = i + 1;
            let mut newlines = 1;
            while j < chars.len() && chars[j].is_whitespace() {
                if chars[j] == '\n' {
                    newlines += 1;
                }
                j += 1;
            }
            if newlines >= 2 {
                push(&mut sentences, start, i);
                start = j;
            }
            i = j;
            continue;
        }
        if !is_terminal(c) {
            i += 1;
            continue;
        }
        let mut end = i;
        while end < chars.len() && is_terminal(chars[end]) {
            end += 1;
        }
        let run_len = end - i;
        while end < chars.len() && is_closer(chars[end]) {
            end += 1;
        }
        let at_boundary = end == chars.len() || chars[end].is_whitespace();
        if at_boundary && !(run_len == 1 && c == '.' && ends_with_abbreviation(&chars[start..i])) {
            push(&mut sentences, start, end);
            start = end;
        }
        i = end;
    }
    push(&mut sentences, start, chars.len());
    sentences
}

fn ends_with_abbreviation(before: &[char]) -> bool {
    let word_start = before
        .iter()
        .rposition(|c| c.is_whitespace() || matches!(c, '(' | '"' | '\''))
        .map_or(0, |p| p + 1);
    let word: String = before[word_start..].iter().collect::<String>().to_lowercase();
    !word.is_empty() && ABBREVIATIONS.contains(&word.as_str())
}

/// Splits a body into paragraphs at blank lines.
pub fn paragraphs(body: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\n' {
            let mut j = i + 1;
            let mut newlines = 1;
            while j < bytes.len() && (bytes[j] as char).is_ascii_whitespace() {
                newlines += (bytes[j] == b'\n') as usize;
                j += 1;
            }
            if newlines >= 2 {
                out.push(body[start..i].trim());
                start = j;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    out.push(body[start..].trim());
    out.retain(|p| !p.is_empty());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketKind {
    Short,
    Long,
}

pub const SHORT_MAX_TOKENS: usize = 256;
pub const LONG_MAX_TOKENS: usize = 1024;

impl BucketKind {
    pub fn max_tokens(self) -> usize {
        match self {
            BucketKind::Short => SHORT_MAX_TOKENS,
            BucketKind::Long => LONG_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketedParagraph {
    pub doc_id: String,
    pub index: usize,
    pub ids: Vec<u32>,
    /// Token count before any truncation.
    pub original_len: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Buckets {
    pub short: Vec<BucketedParagraph>,
    pub long: Vec<BucketedParagraph>,
}

impl Buckets {
    pub fn truncated_count(&self) -> usize {
        self.long.iter().filter(|p| p.truncated).count()
    }
}

/// Assigns a token count to its bucket; counts above the long limit go to the
/// long bucket and are truncated.
pub fn bucket_for(len: usize) -> (BucketKind, bool) {
    if len <= SHORT_MAX_TOKENS {
        (BucketKind::Short, false)
    } else {
        (BucketKind::Long, len > LONG_MAX_TOKENS)
    }
}

pub fn bucket_paragraphs(docs: &[Document], vocab: &Vocabulary) -> Buckets {
    let mut buckets = Buckets::default();
    for doc in docs {
        for (index, para) in paragraphs(&doc.body).into_iter().enumerate() {
            let mut ids = vocab.encode(para).ids;
            let original_len = ids.len();
            let (kind, truncated) = bucket_for(original_len);
            ids.truncate(kind.max_tokens());
            let p = BucketedParagraph {
                doc_id: doc.id.clone(),
                index,
                ids,
                original_len,
                truncated,
            };
            match kind {
                BucketKind::Short => buckets.short.push(p),
                BucketKind::Long => buckets.long.push(p),
            }
        }
    }
    buckets
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, dev: f64, test: f64, seed: u64) -> Result<Self, CorpusError> {
        let ok = [train, dev, test].iter().all(|f| (0.0..=1.0).contains(f)) && (train + dev + test - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(CorpusError::BadSplit { train, dev, test });
        }
        Ok(Self { train, dev, test, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

/// Which split a document id lands in; depends only on `(id, seed)`.
pub fn assign_split(id: &str, spec: &SplitSpec) -> SplitName {
    let mut h = Sha256::new();
    h.update(spec.seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) % 1000;
    let train_cut = (spec.train * 1000.0).round() as u64;
    let dev_cut = ((spec.train + spec.dev) * 1000.0).round() as u64;
    if bucket < train_cut {
        SplitName::Train
    } else if bucket < dev_cut {
        SplitName::Dev
    } else {
        SplitName::Test
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

/// Partitions documents by [`assign_split`], keeping input order within each
/// split.
pub fn split_dataset(docs: &[Document], spec: &SplitSpec) -> Result<Splits, CorpusError> {
    check_unique(docs)?;
    let mut out = Splits::default();
    for doc in docs {
        match assign_split(&doc.id, spec) {
            SplitName::Train => out.train.push(doc.clone()),
            SplitName::Dev => out.dev.push(doc.clone()),
            SplitName::Test => out.test.push(doc.clone()),
        }
    }
    Ok(out)
}

fn check_unique(docs: &[Document]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(CorpusError::DuplicateId(d.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    /// `None` for an empty dataset.
    pub avg_body_words: Option<u64>,
    /// `None` when no document has an abstract.
    pub avg_abstract_words: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_body_tokens: Option<u64>,
}

fn rounded_mean(total: usize, n: usize) -> Option<u64> {
    (n > 0).then(|| (total as f64 / n as f64).round() as u64)
}

/// Whitespace-word averages, rounded to the nearest integer. Token averages
/// are added when a vocabulary is given.
pub fn dataset_stats(docs: &[Document], vocab: Option<&Vocabulary>) -> DatasetStats {
    let body: usize = docs.iter().map(|d| d.body.split_whitespace().count()).sum();
    let abstracts: Vec<&String> = docs.iter().filter_map(|d| d.r#abstract.as_ref()).collect();
    let abs_words: usize = abstracts.iter().map(|a| a.split_whitespace().count()).sum();
    let avg_body_tokens = vocab.and_then(|v| {
        let total: usize = docs.iter().map(|d| v.encode(&d.body).len()).sum();
        rounded_mean(total, docs.len())
    });
    DatasetStats {
        count: docs.len(),
        avg_body_words: rounded_mean(body, docs.len()),
        avg_abstract_words: rounded_mean(abs_words, abstracts.len()),
        avg_body_tokens,
    }
}

/// Reads one document per line. Blank lines are skipped; ids must be unique
/// and bodies non-empty.
pub fn read_jsonl(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let file = std::fs::File::open(path)?;
    parse_jsonl(std::io::BufReader::new(file))
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::Json { line: n + 1, msg };
        let doc: Document = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if doc.id.is_empty() {
            return Err(err("empty id".into()));
        }
        if doc.body.trim().is_empty() {
            return Err(err(format!("document {:?} has an empty body", doc.id)));
        }
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in docs {
        let line = serde_json::to_string(d).map_err(|e| CorpusError::Io(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
