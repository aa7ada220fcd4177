//! Loaders for the shared files under `fixtures/`.

use std::path::PathBuf;

use t5lab::corpus::{read_jsonl, Document};
use t5lab::model::ModelConfig;
use t5lab::ner::EntitySpan;
use t5lab::tokenizer::{train_vocab, TrainOptions, Vocabulary};
use t5lab::training::Example;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn overfit_docs() -> Vec<Document> {
    read_jsonl(&fixture_path("overfit_pairs.jsonl")).expect("overfit fixture")
}

/// Small vocabulary trained on the overfit pairs themselves.
pub fn overfit_vocab(docs: &[Document]) -> Vocabulary {
    let text = docs
        .iter()
        .flat_map(|d| [d.body.clone(), d.r#abstract.clone().unwrap_or_default()]);
    let opts = TrainOptions {
        target_size: 360,
        sentinel_count: 8,
        user_pieces: Vec::new(),
    };
    train_vocab(text, &opts).expect("fixture vocab")
}

/// The tiny preset sized to the fixture vocabulary, dropout off.
pub fn overfit_config(vocab: &Vocabulary) -> ModelConfig {
    let mut c = ModelConfig::preset("tiny").unwrap();
    c.vocab_size = vocab.size() as usize;
    c.max_input_len = 64;
    c.max_target_len = 32;
    c.dropout_rate = 0.0;
    c
}

pub fn overfit_examples(docs: &[Document], vocab: &Vocabulary, config: &ModelConfig) -> Vec<Example> {
    docs.iter()
        .map(|d| {
            let x = vocab.encode(&d.body).ids;
            let y = vocab.encode(d.r#abstract.as_deref().unwrap()).ids;
            Example::from_ids(&x, &y, config)
        })
        .collect()
}

/// A few-thousand-parameter model for fast end-to-end runs.
pub fn micro_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        rel_pos_buckets: 8,
        rel_pos_max_distance: 16,
        max_input_len: 64,
        max_target_len: 32,
        dropout_rate: 0.1,
    }
}

/// Gold sentences of the 20-sentence NER fixture with the rigged generator
/// output for each, line by line.
pub fn ner_fixture() -> (Vec<t5lab::ner::NerSentence>, Vec<String>) {
    let gold = t5lab::ner::read_ner_jsonl(&fixture_path("ner_20.jsonl")).expect("ner fixture");
    let generated: Vec<String> = std::fs::read_to_string(fixture_path("ner_20_generated.txt"))
        .expect("ner outputs")
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(gold.len(), generated.len());
    (gold, generated)
}

/// The ten PhoNER_COVID19 entity types.
pub fn covid_labels() -> t5lab::ner::LabelSet {
    t5lab::ner::LabelSet::new([
        "PATIENT_ID",
        "NAME",
        "AGE",
        "GENDER",
        "JOB",
        "LOCATION",
        "ORGANIZATION",
        "DATE",
        "SYMPTOM_AND_DISEASE",
        "TRANSPORTATION",
    ])
    .unwrap()
}

pub fn clusters() -> Vec<t5lab::mds::DocumentCluster> {
    t5lab::mds::read_clusters_jsonl(&fixture_path("clusters.jsonl")).expect("cluster fixture")
}

/// Vocabulary trained on every document and reference of the clusters.
pub fn cluster_vocab(clusters: &[t5lab::mds::DocumentCluster]) -> Vocabulary {
    let text = clusters.iter().flat_map(|c| c.documents.iter().chain(&c.references).cloned());
    let opts = TrainOptions {
        target_size: 420,
        sentinel_count: 8,
        user_pieces: Vec::new(),
    };
    train_vocab(text, &opts).expect("cluster vocab")
}

/// Every text in the fixtures: overfit bodies and abstracts, cluster
/// documents and references, NER sentences.
pub fn all_text() -> Vec<String> {
    let mut out: Vec<String> = overfit_docs()
        .into_iter()
        .flat_map(|d| [d.body, d.r#abstract.unwrap_or_default()])
        .collect();
    for c in clusters() {
        out.extend(c.documents);
        out.extend(c.references);
    }
    out.extend(ner_fixture().0.iter().map(|s| s.tokens.join(" ")));
    out
}

const FUZZ_POOL: &[&str] = &[
    "a", "b", "n", "h", "t", " ", " ", "  ", "\t", "\n", "ng", "à", "á", "ạ", "ả", "ã", "ầ", "ệ", "ơ", "ư", "ữ",
    "đ", "Đ", "Ấ", "ỹ", "中", "文", "🙂", "👍🏽", "\u{301}", "\u{200b}", "<", ">", "/", "<extra_id_0>", "<AGE>",
    "</AGE>", "<unk>", "0", "7", ".", ",", "bệnh", "nhân", " Hà Nội", "\r\n", "\u{0}",
];

/// Random text over a pool of ASCII, precomposed and combining
/// diacritics, CJK, emoji, control characters and tag-like strings.
pub fn fuzz_text(rng: &mut impl rand::Rng) -> String {
    let n = rng.gen_range(0..40);
    (0..n).map(|_| FUZZ_POOL[rng.gen_range(0..FUZZ_POOL.len())]).collect()
}

/// Aligned predictions for the 20-sentence fixture, written out by hand.
/// The NAME span in sentence 8 does not align to the source and is absent.
pub fn hand_predictions() -> Vec<Vec<EntitySpan>> {
    let sd = "SYMPTOM_AND_DISEASE";
    vec![
        vec![EntitySpan::new(2, 3, "PATIENT_ID"), EntitySpan::new(4, 5, "GENDER"), EntitySpan::new(6, 7, "AGE")],
        vec![EntitySpan::new(1, 2, "PATIENT_ID"), EntitySpan::new(3, 4, "JOB")],
        vec![EntitySpan::new(2, 4, "LOCATION"), EntitySpan::new(5, 7, "ORGANIZATION")],
        vec![],
        vec![EntitySpan::new(0, 4, "ORGANIZATION"), EntitySpan::new(6, 8, "PATIENT_ID")],
        vec![],
        vec![EntitySpan::new(3, 4, sd), EntitySpan::new(5, 6, sd)],
        vec![EntitySpan::new(5, 6, "AGE")],
        vec![EntitySpan::new(3, 10, "LOCATION")],
        vec![EntitySpan::new(1, 2, "PATIENT_ID"), EntitySpan::new(4, 6, "JOB")],
        vec![EntitySpan::new(1, 4, "DATE")],
        vec![EntitySpan::new(0, 1, "GENDER"), EntitySpan::new(2, 3, "AGE"), EntitySpan::new(6, 8, "LOCATION")],
        vec![EntitySpan::new(1, 3, "TRANSPORTATION"), EntitySpan::new(5, 7, "LOCATION")],
        vec![EntitySpan::new(2, 3, "LOCATION")],
        vec![EntitySpan::new(2, 3, "PATIENT_ID"), EntitySpan::new(7, 8, "PATIENT_ID")],
        vec![EntitySpan::new(2, 3, "ORGANIZATION"), EntitySpan::new(4, 6, "LOCATION")],
        vec![EntitySpan::new(5, 6, "DATE")],
        vec![],
        vec![EntitySpan::new(0, 4, "JOB"), EntitySpan::new(4, 7, "ORGANIZATION")],
        vec![EntitySpan::new(4, 5, "AGE")],
    ]
}
