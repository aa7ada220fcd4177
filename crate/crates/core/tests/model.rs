mod support;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{gradient_check, oracles};
use t5lab::model::{
    count_params, forward, init_params, param_shapes, relative_bucket, InferenceModel, ModelConfig, ModelError,
    ModelParams, Weights,
};
use t5lab::tensor::{Tape, Tensor, Var};

fn config(vocab: usize, d: usize, ff: usize, heads: usize, enc: usize, dec: usize, buckets: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        d_ff: ff,
        n_heads: heads,
        n_enc_layers: enc,
        n_dec_layers: dec,
        rel_pos_buckets: buckets,
        rel_pos_max_distance: 16,
        max_input_len: 64,
        max_target_len: 64,
        dropout_rate: 0.0,
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.gen_range(1..4);
    config(
        rng.gen_range(5..40),
        heads * rng.gen_range(1..5),
        rng.gen_range(1..12),
        heads,
        rng.gen_range(1..3),
        rng.gen_range(1..3),
        rng.gen_range(2..10),
    )
}

fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn logits_shape() {
    let p = init_params(&config(11, 8, 16, 2, 1, 1, 4), 0).unwrap();
    let m = InferenceModel::new(&p);
    let out = m.logits(&[vec![3; 5], vec![4; 5]], &[vec![0; 4], vec![0; 4]]).unwrap();
    assert_eq!(out.shape(), &[2, 4, 11]);
}

#[test]
fn decoder_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let c = random_config(&mut rng);
        let p = init_params(&c, seed).unwrap();
        let m = InferenceModel::new(&p);
        let enc = random_ids(&mut rng, 6, c.vocab_size);
        let dec = random_ids(&mut rng, 7, c.vocab_size);
        let base = m.logits(std::slice::from_ref(&enc), std::slice::from_ref(&dec)).unwrap();
        for t in 0..dec.len() {
            let mut changed = dec.clone();
            changed[t] = (changed[t] + 1) % c.vocab_size as u32;
            let out = m.logits(std::slice::from_ref(&enc), &[changed]).unwrap();
            let v = c.vocab_size;
            assert_eq!(&base.data()[..t * v], &out.data()[..t * v], "position {t}");
        }
    }
}

/// Single head, d_model 2, every weight set by hand.
fn micro_params() -> ModelParams {
    let c = ModelConfig {
        vocab_size: 3,
        d_model: 2,
        d_ff: 2,
        n_heads: 1,
        n_enc_layers: 1,
        n_dec_layers: 1,
        rel_pos_buckets: 2,
        rel_pos_max_distance: 4,
        max_input_len: 4,
        max_target_len: 4,
        dropout_rate: 0.0,
    };
    let t = |shape: &[usize], v: &[f64]| Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
    let ident = [1.0, 0.0, 0.0, 1.0];
    let swap = [0.0, 1.0, 1.0, 0.0];
    let mut named = HashMap::new();
    named.insert("shared.embedding".into(), t(&[3, 2], &[0.5, -0.5, 1.0, 0.0, 0.0, 2.0]));
    named.insert("encoder.rel_bias".into(), t(&[2, 1], &[0.25, -0.25]));
    named.insert("decoder.rel_bias".into(), t(&[2, 1], &[0.1, 0.3]));
    for stack in ["encoder.0.self_attn", "decoder.0.self_attn", "decoder.0.cross_attn"] {
        named.insert(format!("{stack}.q"), t(&[2, 2], &ident));
        named.insert(format!("{stack}.k"), t(&[2, 2], &[2.0, 0.0, 0.0, 1.0]));
        named.insert(format!("{stack}.v"), t(&[2, 2], &swap));
        named.insert(format!("{stack}.o"), t(&[2, 2], &[0.5, 0.0, 0.0, 0.5]));
    }
    for stack in ["encoder.0", "decoder.0"] {
        named.insert(format!("{stack}.ffn.wi"), t(&[2, 2], &[1.0, -1.0, 1.0, 1.0]));
        named.insert(format!("{stack}.ffn.wo"), t(&[2, 2], &[0.5, 0.0, 0.0, -0.5]));
    }
    for norm in param_shapes(&c).into_iter().filter(|(n, _)| n.ends_with("_norm")) {
        named.insert(norm.0, t(&[2], &[1.0, 2.0]));
    }
    ModelParams::from_named(c, named).unwrap()
}

#[test]
fn micro_model_matches_scalar_oracle() {
    let p = micro_params();
    let m = InferenceModel::new(&p);
    let (enc, dec) = (vec![1, 2], vec![0, 2]);
    let got = m.logits(std::slice::from_ref(&enc), std::slice::from_ref(&dec)).unwrap();
    let want: Vec<f64> = oracles::scalar_logits(&p, &enc, &dec).concat();
    assert!(max_abs_diff(got.data(), &want) < 1e-12, "{:?} vs {want:?}", got.data());
}

#[test]
fn random_models_match_scalar_oracle_with_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let c = random_config(&mut rng);
        let p = init_params(&c, seed).unwrap();
        let m = InferenceModel::new(&p);
        let mut seq = |max: usize| {
            let len = rng.gen_range(1..max);
            random_ids(&mut rng, len, c.vocab_size)
        };
        let enc: Vec<Vec<u32>> = (0..3).map(|_| seq(9)).collect();
        let dec: Vec<Vec<u32>> = (0..3).map(|_| seq(7)).collect();
        let out = m.logits(&enc, &dec).unwrap();
        let t_dec = out.shape()[1];
        for b in 0..3 {
            let want = oracles::scalar_logits(&p, &enc[b], &dec[b]);
            for (t, row) in want.iter().enumerate() {
                let start = (b * t_dec + t) * c.vocab_size;
                let got = &out.data()[start..start + c.vocab_size];
                assert!(max_abs_diff(got, row) < 1e-9, "seed {seed} item {b} pos {t}");
            }
        }
    }
}

#[test]
fn encoder_padding_leaves_logits_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..10 {
        let c = random_config(&mut rng);
        let m = InferenceModel::new(&init_params(&c, seed).unwrap());
        let enc = random_ids(&mut rng, 4, c.vocab_size);
        let dec = random_ids(&mut rng, 5, c.vocab_size);
        let alone = m.logits(std::slice::from_ref(&enc), std::slice::from_ref(&dec)).unwrap();
        // the long neighbour forces 6 pad positions onto `enc`
        let long = random_ids(&mut rng, 10, c.vocab_size);
        let padded = m.logits(&[enc, long], &[dec.clone(), dec]).unwrap();
        let n = alone.numel();
        assert!(max_abs_diff(alone.data(), &padded.data()[..n]) < 1e-9);
    }
}

#[test]
fn cached_decoding_matches_full_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..10 {
        let c = random_config(&mut rng);
        let m = InferenceModel::new(&init_params(&c, seed).unwrap());
        let enc = random_ids(&mut rng, 6, c.vocab_size);
        let dec = random_ids(&mut rng, 8, c.vocab_size);
        let full = m.logits(std::slice::from_ref(&enc), std::slice::from_ref(&dec)).unwrap();
        let mem = m.encode(&enc).unwrap();
        let mut state = m.start();
        for (t, &tok) in dec.iter().enumerate() {
            let step = m.step(&mem, &mut state, tok).unwrap();
            let v = c.vocab_size;
            assert!(max_abs_diff(&step, &full.data()[t * v..(t + 1) * v]) < 1e-9);
        }
    }
}

#[test]
fn contract_errors() {
    let c = config(11, 8, 16, 2, 1, 1, 4);
    let m = InferenceModel::new(&init_params(&c, 0).unwrap());
    assert!(matches!(
        m.logits(&[vec![1; 65]], &[vec![0]]),
        Err(ModelError::Length { which: "encoder", .. })
    ));
    assert!(matches!(
        m.logits(&[vec![1, 11]], &[vec![0]]),
        Err(ModelError::TokenRange { id: 11, vocab: 11 })
    ));
    assert!(matches!(m.logits(&[vec![1]], &[]), Err(ModelError::BatchMismatch { .. })));
}

#[test]
fn count_matches_instantiated_tensors() {
    let tiny = config(100, 8, 16, 2, 1, 1, 4);
    let p = init_params(&tiny, 0).unwrap();
    assert_eq!(count_params(&tiny), p.numel());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let c = random_config(&mut rng);
        let brute: u64 = param_shapes(&c).iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum();
        assert_eq!(count_params(&c), brute);
        assert_eq!(init_params(&c, 1).unwrap().numel(), brute);
    }
}

#[test]
fn count_is_additive_and_length_free() {
    let c = config(100, 8, 16, 2, 1, 1, 4);
    let layer = (4 * 8 * 8 + 2 * 8 * 16 + 2 * 8) as u64;
    let mut doubled = c.clone();
    doubled.n_enc_layers = 2;
    assert_eq!(count_params(&doubled), count_params(&c) + layer);
    let mut longer = c.clone();
    longer.max_input_len = 1024;
    assert_eq!(count_params(&longer), count_params(&c));
}

#[test]
fn presets_hit_stated_totals() {
    for (name, target) in [("base-256", 310e6), ("base-1024", 310e6), ("large-1024", 866e6)] {
        let n = count_params(&ModelConfig::preset(name).unwrap()) as f64;
        let rel = (n - target).abs() / target;
        assert!(rel <= 0.05, "{name}: {n} vs {target} ({:.2}%)", rel * 100.0);
    }
}

#[test]
fn projection_init_variance() {
    let c = config(50, 64, 128, 4, 1, 1, 8);
    let p = init_params(&c, 9).unwrap();
    let q = p.get("encoder.0.self_attn.q").unwrap();
    let n = q.numel() as f64;
    let mean = q.data().iter().sum::<f64>() / n;
    let var = q.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - 1.0 / 64.0).abs() / (1.0 / 64.0) < 0.2, "variance {var}");
}

#[test]
fn bucket_table_matches_enumeration() {
    // per half: offsets 0, 1 exact; 2..=5 in bucket 2; 6 and beyond in 3
    let hand = |d: i64| -> usize {
        let n = d.unsigned_abs();
        let b = match n {
            0 => 0,
            1 => 1,
            2..=5 => 2,
            _ => 3,
        };
        if d > 0 {
            b + 4
        } else {
            b
        }
    };
    for d in -32..=32 {
        assert_eq!(relative_bucket(d, 8, 16, true), hand(d), "distance {d}");
        assert_eq!(relative_bucket(d, 8, 16, true), oracles::bucket(d, 8, 16, true));
        assert_eq!(relative_bucket(d, 8, 16, false), oracles::bucket(d, 8, 16, false));
    }
    for (buckets, max_d) in [(32, 128), (16, 64), (6, 10), (3, 7), (12, 40)] {
        for bidi in [true, false] {
            for d in -300..=300 {
                assert_eq!(
                    relative_bucket(d, buckets, max_d, bidi),
                    oracles::bucket(d, buckets, max_d, bidi),
                    "buckets {buckets} max {max_d} bidi {bidi} distance {d}"
                );
            }
        }
    }
}

#[test]
fn buckets_saturate_and_are_monotone() {
    for bidi in [true, false] {
        let sat = relative_bucket(-128, 32, 128, bidi);
        for d in 128..500 {
            assert_eq!(relative_bucket(-d, 32, 128, bidi), sat);
        }
        let mut prev = 0;
        for d in 0..200 {
            let b = relative_bucket(-d, 32, 128, bidi);
            assert!(b >= prev);
            prev = b;
        }
    }
}

#[test]
fn end_to_end_gradient_check() {
    let c = config(7, 4, 6, 2, 1, 1, 4);
    let p = init_params(&c, 11).unwrap();
    let inputs: Vec<Tensor> = p.iter().map(|(_, t)| (**t).clone()).collect();
    let enc = vec![vec![3, 5, 1], vec![2, 6]];
    let dec = vec![vec![0, 4, 2], vec![0, 1]];
    let targets = [4usize, 2, 1, 1, 0, 0];
    let mask = [true, true, true, true, true, false];
    let loss = |tape: &Tape, vars: &[Var]| -> Var {
        let w = Weights::from_values(&c, vars.to_vec());
        let logits = forward(tape, &w, &enc, &dec, None).unwrap();
        tape.cross_entropy(logits, &targets, &mask).unwrap()
    };
    let err = gradient_check(&inputs, &loss);
    assert!(err < 1e-4, "max rel err {err:e}");
}

#[test]
fn tape_and_eval_agree() {
    let c = config(13, 6, 8, 3, 2, 1, 6);
    let p = init_params(&c, 2).unwrap();
    let enc = vec![vec![1, 2, 3, 4]];
    let dec = vec![vec![0, 7, 8]];
    let tape = Tape::new();
    let w = Weights::bind(&tape, &p);
    let on_tape = tape.value(forward(&tape, &w, &enc, &dec, None).unwrap());
    let eval = InferenceModel::new(&p).logits(&enc, &dec).unwrap();
    assert_eq!(on_tape.data(), eval.data());
}
