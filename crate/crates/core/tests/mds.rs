mod support;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::fixtures::{cluster_vocab, clusters, micro_config};
use support::oracles::{argsort_top_k, brute_rouge_n, memo_rouge_l, scalar_cosine, scalar_encoder, scalar_greedy};
use t5lab::generation::DecodeConfig;
use t5lab::mds::{
    abstractive_summarize_with, embed_batch, embed_cluster, evaluate_cluster, extractive_summarize, select_top_k,
    DocumentCluster, ExtractOptions, MdsError, Metric, QueryMode, SentenceEmbedding,
};
use t5lab::metrics::{score_multi, score_tokens, MultiRef};
use t5lab::model::{init_params, InferenceModel, ModelParams};
use t5lab::tokenizer::{Vocabulary, EOS_ID};

fn setup() -> (Vec<DocumentCluster>, Vocabulary, ModelParams) {
    let cs = clusters();
    let vocab = cluster_vocab(&cs);
    let params = init_params(&micro_config(vocab.size() as usize), 31).unwrap();
    (cs, vocab, params)
}

fn source_of(i: usize) -> (usize, usize) {
    (i / 7, i % 7)
}

fn oracle_similarity(metric: Metric, u: &[f64], v: &[f64]) -> f64 {
    match metric {
        // the ranking clamps cosine to [-1, 1]; without the clamp a parallel
        // pair can score 1 + 2e-16 and break a tie
        Metric::Cosine => scalar_cosine(u, v).clamp(-1.0, 1.0),
        Metric::Manhattan => -u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum::<f64>(),
        Metric::Euclidean => -u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
    }
}

#[test]
fn top_k_matches_argsort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for case in 0..3000 {
        let n = rng.gen_range(1..=100);
        let d = rng.gen_range(1..6);
        // small integer coordinates make exact ties common
        let coarse = case % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..d)
                    .map(|_| {
                        if coarse {
                            rng.gen_range(-2..=2) as f64
                        } else {
                            rng.gen_range(-1.0..1.0)
                        }
                    })
                    .collect();
                if v.iter().any(|x| *x != 0.0) {
                    return v;
                }
            }
        };
        let embeddings: Vec<SentenceEmbedding> = (0..n)
            .map(|i| SentenceEmbedding {
                text: format!("s{i}"),
                vector: draw(&mut rng),
                source: source_of(i),
            })
            .collect();
        let queries: Vec<Vec<f64>> = (0..rng.gen_range(1..4)).map(|_| draw(&mut rng)).collect();
        let k = rng.gen_range(1..=n + 3);
        let metric = [Metric::Cosine, Metric::Manhattan, Metric::Euclidean][case % 3];

        let scores: Vec<f64> = embeddings
            .iter()
            .map(|e| {
                queries
                    .iter()
                    .map(|q| oracle_similarity(metric, &e.vector, q))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let want = argsort_top_k(&scores, k);
        let got = select_top_k(&embeddings, &queries, k, metric).unwrap();
        let ranked: Vec<(usize, usize)> = got.ranked.iter().map(|s| s.source).collect();
        let expected: Vec<(usize, usize)> = want.iter().map(|&i| source_of(i)).collect();
        assert_eq!(ranked, expected, "case {case}");
        assert_eq!(got.clamped, k > n);
        let mut sorted = expected.clone();
        sorted.sort();
        assert_eq!(got.sentences.iter().map(|s| s.source).collect::<Vec<_>>(), sorted);
    }
}

#[test]
fn cosine_ranking_ignores_query_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let embeddings: Vec<SentenceEmbedding> = (0..30)
            .map(|i| SentenceEmbedding {
                text: String::new(),
                vector: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                source: source_of(i),
            })
            .collect();
        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = q.iter().map(|x| x * 7.5).collect();
        let a = select_top_k(&embeddings, &[q], 5, Metric::Cosine).unwrap();
        let b = select_top_k(&embeddings, &[scaled], 5, Metric::Cosine).unwrap();
        let src = |c: &t5lab::mds::ExtractiveContext| c.ranked.iter().map(|s| s.source).collect::<Vec<_>>();
        assert_eq!(src(&a), src(&b));
    }
}

#[test]
fn extractive_recall_never_drops_as_k_grows() {
    let (cs, vocab, params) = setup();
    let model = InferenceModel::new(&params);
    for c in &cs {
        let n = c.sentences().len();
        for mode in [QueryMode::Reference, QueryMode::Centroid] {
            let mut last = (0.0, 0.0);
            for k in 1..=n + 1 {
                let opts = ExtractOptions {
                    k,
                    mode,
                    metric: Metric::Cosine,
                };
                let ctx = extractive_summarize(&model, &vocab, c, &opts).unwrap();
                let s = score_multi(&ctx.text(), &c.references, MultiRef::Max).unwrap();
                let now = (s.rouge1.recall, s.rouge_l.recall);
                assert!(now.0 >= last.0 && now.1 >= last.1, "{} k={k}: {last:?} -> {now:?}", c.id);
                last = now;
            }
        }
    }
}

#[test]
fn reference_identical_sentence_ranks_first() {
    let (cs, vocab, params) = setup();
    let model = InferenceModel::new(&params);
    // the fixture has one such cluster already
    let c3 = cs.iter().find(|c| c.id == "c3").unwrap();
    let ctx = extractive_summarize(&model, &vocab, c3, &ExtractOptions::default()).unwrap();
    assert_eq!(ctx.ranked[0].source, (0, 0));
    assert!((ctx.ranked[0].score - 1.0).abs() < 1e-12);
    // and every sentence of every cluster, used as the reference in turn
    for c in &cs {
        for (source, text) in c.sentences() {
            let probe = DocumentCluster {
                references: vec![text.clone()],
                ..c.clone()
            };
            let ctx = extractive_summarize(&model, &vocab, &probe, &ExtractOptions::default()).unwrap();
            assert_eq!(ctx.ranked[0].source, source, "{}: {text}", c.id);
        }
    }
}

#[test]
fn centroid_mode_ignores_document_order() {
    let (cs, vocab, params) = setup();
    let model = InferenceModel::new(&params);
    let opts = ExtractOptions {
        k: 3,
        mode: QueryMode::Centroid,
        metric: Metric::Cosine,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for c in &cs {
        let base = extractive_summarize(&model, &vocab, c, &opts).unwrap();
        let mut texts: Vec<&str> = base.ranked.iter().map(|s| s.text.as_str()).collect();
        texts.sort();
        for _ in 0..4 {
            let mut shuffled = c.clone();
            shuffled.documents.shuffle(&mut rng);
            let other = extractive_summarize(&model, &vocab, &shuffled, &opts).unwrap();
            let mut t: Vec<&str> = other.ranked.iter().map(|s| s.text.as_str()).collect();
            t.sort();
            assert_eq!(t, texts, "{}", c.id);
        }
    }
}

#[test]
fn batched_embeddings_ignore_padding() {
    let (_, vocab, params) = setup();
    let model = InferenceModel::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let batch: Vec<Vec<u32>> = (0..8)
        .map(|_| (0..rng.gen_range(1..30)).map(|_| rng.gen_range(3..vocab.size())).collect())
        .collect();
    let together = embed_batch(&model, &batch).unwrap();
    for (ids, got) in batch.iter().zip(&together) {
        let alone = &embed_batch(&model, std::slice::from_ref(ids)).unwrap()[0];
        let states = scalar_encoder(&params, ids);
        for j in 0..got.len() {
            assert!((got[j] - alone[j]).abs() < 1e-9);
            let mean = states.iter().map(|s| s[j]).sum::<f64>() / states.len() as f64;
            assert!((got[j] - mean).abs() < 1e-9);
        }
    }
}

#[test]
fn single_token_embedding_is_its_state() {
    let (_, _, params) = setup();
    let model = InferenceModel::new(&params);
    for tok in [3u32, 40, 200] {
        let got = &embed_batch(&model, &[vec![tok]]).unwrap()[0];
        let state = &scalar_encoder(&params, &[tok])[0];
        for (a, b) in got.iter().zip(state) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Elementwise max over references of brute-force (p, r, f) triples.
fn oracle_rouge(candidate: &str, references: &[String]) -> [(f64, f64, f64); 3] {
    let c = score_tokens(candidate);
    let mut best = [(0.0f64, 0.0f64, 0.0f64); 3];
    for r in references {
        let r = score_tokens(r);
        let all = [brute_rouge_n(&c, &r, 1), brute_rouge_n(&c, &r, 2), memo_rouge_l(&c, &r)];
        for (b, s) in best.iter_mut().zip(all) {
            *b = (b.0.max(s.0), b.1.max(s.1), b.2.max(s.2));
        }
    }
    best
}

/// The full cluster pipeline by independent means: per-sequence scalar
/// encoder, scalar cosine, selection sort, full-recompute greedy decoding
/// and brute-force ROUGE.
fn scalar_cluster(params: &ModelParams, vocab: &Vocabulary, c: &DocumentCluster, k: usize, max_len: usize) -> (String, String, [[(f64, f64, f64); 3]; 2]) {
    let cfg = params.config();
    let embed = |text: &str| {
        let mut ids = vocab.encode(text).ids;
        ids.truncate(cfg.max_input_len);
        let states = scalar_encoder(params, &ids);
        (0..cfg.d_model)
            .map(|j| states.iter().map(|s| s[j]).sum::<f64>() / states.len() as f64)
            .collect::<Vec<f64>>()
    };
    let sentences = c.sentences();
    let queries: Vec<Vec<f64>> = c.references.iter().map(|r| embed(r)).collect();
    let scores: Vec<f64> = sentences
        .iter()
        .map(|(_, t)| {
            let e = embed(t);
            queries.iter().map(|q| scalar_cosine(&e, q)).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut chosen = argsort_top_k(&scores, k);
    chosen.sort();
    let context = chosen.iter().map(|&i| sentences[i].1.as_str()).collect::<Vec<_>>().join(" ");

    let mut input: Vec<u32> = vocab.encode(&context).ids;
    input.truncate(cfg.max_input_len - 1);
    input.push(EOS_ID);
    let summary = vocab.decode(&scalar_greedy(params, &input, max_len, EOS_ID)).unwrap();
    let scores = [oracle_rouge(&context, &c.references), oracle_rouge(&summary, &c.references)];
    (context, summary, scores)
}

#[test]
fn evaluate_cluster_matches_scalar_recomputation() {
    let (cs, vocab, params) = setup();
    let model = InferenceModel::new(&params);
    for k in [1, 3, 5] {
        for c in &cs {
            let opts = ExtractOptions {
                k,
                ..ExtractOptions::default()
            };
            let got = evaluate_cluster(&model, &vocab, c, &opts, &DecodeConfig::greedy(12), MultiRef::Max).unwrap();
            let (context, summary, want) = scalar_cluster(&params, &vocab, c, k, 12);
            assert_eq!(got.context, context, "{} k={k}", c.id);
            assert_eq!(got.summary, summary, "{} k={k}", c.id);
            for (triple, w) in [got.extractive, got.abstractive].iter().zip(want) {
                let fields = [triple.rouge1, triple.rouge2, triple.rouge_l];
                for (s, o) in fields.iter().zip(w) {
                    assert!((s.precision - o.0).abs() < 1e-9);
                    assert!((s.recall - o.1).abs() < 1e-9);
                    assert!((s.f1 - o.2).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn copying_the_context_reproduces_it_unless_truncated() {
    let (cs, vocab, params) = setup();
    let model = InferenceModel::new(&params);
    let copy = |ids: &[u32]| -> Result<Vec<u32>, MdsError> { Ok(ids[..ids.len() - 1].to_vec()) };
    for c in &cs {
        let ctx = extractive_summarize(&model, &vocab, c, &ExtractOptions::default()).unwrap();
        let full = vocab.encode(&ctx.text()).ids.len();
        let wide = abstractive_summarize_with(&vocab, &ctx, full + 1, copy).unwrap();
        assert!(!wide.truncated);
        assert_eq!(wide.text, ctx.text());
        let narrow = abstractive_summarize_with(&vocab, &ctx, full, copy).unwrap();
        assert!(narrow.truncated);
        assert!(ctx.text().starts_with(narrow.text.trim_end_matches('\u{FFFD}')));
    }
}

#[test]
fn bad_requests_are_rejected() {
    let (cs, vocab, params) = setup();
    let model = InferenceModel::new(&params);
    let zero = ExtractOptions {
        k: 0,
        ..ExtractOptions::default()
    };
    assert!(matches!(extractive_summarize(&model, &vocab, &cs[0], &zero), Err(MdsError::ZeroK)));
    let no_refs = DocumentCluster {
        references: vec![],
        ..cs[0].clone()
    };
    assert!(matches!(
        extractive_summarize(&model, &vocab, &no_refs, &ExtractOptions::default()),
        Err(MdsError::MissingReferences(_))
    ));
    let empty = DocumentCluster {
        documents: vec![],
        ..cs[0].clone()
    };
    assert!(matches!(embed_cluster(&model, &vocab, &empty), Err(MdsError::NoDocuments(_))));
    let blank = DocumentCluster {
        documents: vec!["   ".into()],
        ..cs[0].clone()
    };
    assert!(matches!(embed_cluster(&model, &vocab, &blank), Err(MdsError::NoSentences(_))));
}
