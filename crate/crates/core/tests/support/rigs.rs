//! Hand-built stand-ins for trained models.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t5lab::generation::{log_softmax, GenerationError, StepScorer};

/// Next-token distribution drawn from a seed and the prefix, so every
/// prefix has its own fixed random distribution.
pub struct TableScorer {
    pub vocab: usize,
    pub seed: u64,
    /// Logit spread; small values produce near-ties.
    pub scale: f64,
}

impl TableScorer {
    pub fn log_probs(&self, prefix: &[u32]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-self.scale..self.scale)).collect();
        log_softmax(&logits)
    }
}

impl StepScorer for TableScorer {
    type State = Vec<u32>;

    fn initial(&self) -> Result<(Vec<u32>, Vec<f64>), GenerationError> {
        Ok((Vec::new(), self.log_probs(&[])))
    }

    fn extend(&self, state: &Vec<u32>, token: u32) -> Result<(Vec<u32>, Vec<f64>), GenerationError> {
        let mut s = state.clone();
        s.push(token);
        let lp = self.log_probs(&s);
        Ok((s, lp))
    }
}

/// Returns a canned output per source sentence.
pub struct LookupTagger(pub std::collections::HashMap<Vec<String>, String>);

impl t5lab::ner::Tagger for LookupTagger {
    fn tag(&self, tokens: &[String]) -> Result<String, t5lab::ner::NerError> {
        Ok(self.0.get(tokens).cloned().unwrap_or_default())
    }
}
