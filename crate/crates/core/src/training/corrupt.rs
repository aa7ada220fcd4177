use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::tokenizer::{Vocabulary, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub corruption_rate: f64,
    pub mean_span_length: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            corruption_rate: 0.15,
            mean_span_length: 3.0,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// The reserved block at the top of a vocabulary: `<extra_id_k>` is
/// `vocab_size - 1 - k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sentinels {
    pub vocab_size: u32,
    pub count: u32,
}

impl Sentinels {
    pub fn of(vocab: &Vocabulary) -> Self {
        Self {
            vocab_size: vocab.size(),
            count: vocab.sentinel_count(),
        }
    }

    pub fn id(&self, k: u32) -> u32 {
        self.vocab_size - 1 - k
    }

    pub fn index(&self, id: u32) -> Option<u32> {
        (id < self.vocab_size && id >= self.vocab_size - self.count).then(|| self.vocab_size - 1 - id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionExample {
    /// Original tokens with each masked span replaced by its sentinel. No eos.
    pub input_ids: Vec<u32>,
    /// Each sentinel followed by the tokens it hides, then eos.
    pub target_ids: Vec<u32>,
}

/// Uniform k-subset of `0..n` in increasing order (selection sampling: item
/// `i` is taken with probability `needed / remaining`).
pub fn sample_subset(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n);
    let mut out = Vec::with_capacity(k);
    for i in 0..n {
        if out.len() == k {
            break;
        }
        if rng.gen_range(0..n - i) < k - out.len() {
            out.push(i);
        }
    }
    out
}

/// Number of tokens and spans to mask in a sequence of length `n`.
pub fn span_plan(n: usize, spec: &CorruptionSpec) -> (usize, usize) {
    let masked = (n as f64 * spec.corruption_rate).round() as usize;
    let spans = ((masked as f64 / spec.mean_span_length).round() as usize).max(1);
    (masked, spans)
}

/// Span lengths and the unmasked gaps around them, each drawn uniformly:
/// lengths are a composition of `masked` into `spans` positive parts, gaps a
/// split of the rest into `spans + 1` parts with every inner gap non-empty.
fn place_spans(rng: &mut impl Rng, n: usize, masked: usize, spans: usize) -> (Vec<usize>, Vec<usize>) {
    let cuts = sample_subset(rng, masked - 1, spans - 1);
    let mut lengths = Vec::with_capacity(spans);
    let mut prev = 0;
    for c in cuts.iter().map(|c| c + 1).chain(std::iter::once(masked)) {
        lengths.push(c - prev);
        prev = c;
    }
    // stars and bars over the free unmasked tokens
    let free = n - masked - (spans - 1);
    let bars = sample_subset(rng, free + spans, spans);
    let mut gaps = Vec::with_capacity(spans + 1);
    let mut prev = 0;
    for (i, b) in bars.iter().enumerate() {
        gaps.push(b - i - prev);
        prev = b - i;
    }
    gaps.push(free - prev);
    for g in &mut gaps[1..spans] {
        *g += 1;
    }
    (lengths, gaps)
}

pub fn span_corrupt(tokens: &[u32], spec: &CorruptionSpec, sentinels: Sentinels) -> Result<CorruptionExample, TrainError> {
    let n = tokens.len();
    if n < 2 {
        return Err(TrainError::Corruption(format!("sequence of {n} tokens is too short")));
    }
    if let Some(&t) = tokens.iter().find(|&&t| sentinels.index(t).is_some()) {
        return Err(TrainError::Corruption(format!("input already contains sentinel id {t}")));
    }
    let (masked, spans) = span_plan(n, spec);
    if masked == 0 {
        return Err(TrainError::Corruption(format!(
            "rate {} masks no tokens in a sequence of {n}",
            spec.corruption_rate
        )));
    }
    if spans > masked || spans - 1 > n - masked {
        return Err(TrainError::Corruption(format!(
            "cannot place {spans} separated spans covering {masked} of {n} tokens"
        )));
    }
    if spans > sentinels.count as usize {
        return Err(TrainError::Corruption(format!(
            "{spans} spans exceed the {} available sentinels",
            sentinels.count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lengths, gaps) = place_spans(&mut rng, n, masked, spans);

    let mut input = Vec::with_capacity(n - masked + spans);
    let mut target = Vec::with_capacity(masked + spans + 1);
    let mut pos = 0;
    for k in 0..spans {
        input.extend_from_slice(&tokens[pos..pos + gaps[k]]);
        pos += gaps[k];
        let s = sentinels.id(k as u32);
        input.push(s);
        target.push(s);
        target.extend_from_slice(&tokens[pos..pos + lengths[k]]);
        pos += lengths[k];
    }
    input.extend_from_slice(&tokens[pos..]);
    target.push(EOS_ID);
    Ok(CorruptionExample {
        input_ids: input,
        target_ids: target,
    })
}

/// Model-ready encoder input: `ids` plus eos, cut to `max_len`.
pub fn encoder_input(ids: &[u32], max_len: usize) -> Vec<u32> {
    let mut v: Vec<u32> = ids.iter().copied().take(max_len.saturating_sub(1)).collect();
    v.push(EOS_ID);
    v
}
