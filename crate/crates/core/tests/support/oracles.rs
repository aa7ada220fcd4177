//! Reference implementations written with plain loops over `f64`.

use std::collections::HashMap;

use t5lab::model::ModelParams;

/// Relative position bucket computed from the threshold definition with
/// exact integer arithmetic: an offset `n >= max_exact` lands in bucket
/// `max_exact + #{k >= 1 : n >= max_exact * (max_distance/max_exact)^(k/steps)}`,
/// and offsets at or past `max_distance` share the last bucket.
pub fn bucket(distance: i64, buckets: usize, max_distance: usize, bidirectional: bool) -> usize {
    let (half, base, n) = if bidirectional {
        let half = buckets / 2;
        (half, if distance > 0 { half } else { 0 }, distance.unsigned_abs() as u128)
    } else {
        (buckets, 0, (-distance).max(0) as u128)
    };
    let me = (half / 2) as u128;
    if n < me {
        return base + n as usize;
    }
    if me == 0 || max_distance as u128 <= me {
        return base + half - 1;
    }
    if n >= max_distance as u128 {
        return base + half - 1;
    }
    let steps = (half as u128 - me) as u32;
    // ratio max_distance/max_exact as a reduced fraction p/q
    let g = gcd(max_distance as u128, me);
    let (p, q) = (max_distance as u128 / g, me / g);
    let mut k = 0u32;
    // n >= me * (p/q)^(k/steps)  <=>  n^steps * q^k >= me^steps * p^k
    let pow = |b: u128, e: u32| b.checked_pow(e).expect("oracle range");
    while k < steps && pow(n, steps) * pow(q, k + 1) >= pow(me, steps) * pow(p, k + 1) {
        k += 1;
    }
    base + (me as usize + k as usize).min(half - 1)
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

struct Dense<'a> {
    data: &'a [f64],
    cols: usize,
}

impl Dense<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += xi * self.data[i * self.cols + o];
            }
        }
        y
    }
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, s)| v * inv * s).collect()
}

fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

type Bias<'a> = &'a dyn Fn(usize, usize, usize) -> Option<f64>;

/// Loop-based reference model over one unpadded sequence.
struct Scalar<'a> {
    params: &'a ModelParams,
}

impl Scalar<'_> {
    fn raw(&self, name: &str) -> &[f64] {
        self.params.get(name).unwrap_or_else(|| panic!("{name}")).data()
    }

    fn mat(&self, name: &str) -> Dense<'_> {
        Dense {
            data: self.raw(name),
            cols: self.params.get(name).unwrap().shape()[1],
        }
    }

    fn embed(&self, ids: &[u32]) -> Vec<Vec<f64>> {
        let d = self.params.config().d_model;
        let e = self.raw("shared.embedding");
        ids.iter().map(|&t| e[t as usize * d..(t as usize + 1) * d].to_vec()).collect()
    }

    fn norm_all(&self, x: &[Vec<f64>], name: &str) -> Vec<Vec<f64>> {
        x.iter().map(|r| rms(r, self.raw(name))).collect()
    }

    /// `bias(head, i, j)` is added to scores; `None` masks the pair.
    fn attention(&self, prefix: &str, xq: &[Vec<f64>], xkv: &[Vec<f64>], bias: Bias) -> Vec<Vec<f64>> {
        let c = self.params.config();
        let (d, h) = (c.d_model, c.n_heads);
        let dh = d / h;
        let q: Vec<Vec<f64>> = xq.iter().map(|r| self.mat(&format!("{prefix}.q")).apply(r)).collect();
        let k: Vec<Vec<f64>> = xkv.iter().map(|r| self.mat(&format!("{prefix}.k")).apply(r)).collect();
        let v: Vec<Vec<f64>> = xkv.iter().map(|r| self.mat(&format!("{prefix}.v")).apply(r)).collect();
        let mut ctx = vec![vec![0.0; d]; xq.len()];
        for hh in 0..h {
            for i in 0..xq.len() {
                let mut scores: Vec<Option<f64>> = Vec::new();
                for j in 0..xkv.len() {
                    scores.push(bias(hh, i, j).map(|b| {
                        let dot: f64 = (0..dh).map(|t| q[i][hh * dh + t] * k[j][hh * dh + t]).sum();
                        dot / (dh as f64).sqrt() + b
                    }));
                }
                let m = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - m).exp())).collect();
                let z: f64 = ex.iter().sum();
                for j in 0..xkv.len() {
                    for t in 0..dh {
                        ctx[i][hh * dh + t] += ex[j] / z * v[j][hh * dh + t];
                    }
                }
            }
        }
        ctx.iter().map(|r| self.mat(&format!("{prefix}.o")).apply(r)).collect()
    }

    fn ffn(&self, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                let hdn: Vec<f64> = self
                    .mat(&format!("{prefix}.ffn.wi"))
                    .apply(r)
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                self.mat(&format!("{prefix}.ffn.wo")).apply(&hdn)
            })
            .collect()
    }

    fn table(&self, name: &str, bucket_id: usize, head: usize) -> f64 {
        self.raw(name)[bucket_id * self.params.config().n_heads + head]
    }

    fn encoder(&self, enc: &[u32]) -> Vec<Vec<f64>> {
        let c = self.params.config();
        let mut x = self.embed(enc);
        let enc_bias = |hh: usize, i: usize, j: usize| {
            Some(self.table(
                "encoder.rel_bias",
                bucket(j as i64 - i as i64, c.rel_pos_buckets, c.rel_pos_max_distance, true),
                hh,
            ))
        };
        for l in 0..c.n_enc_layers {
            let p = format!("encoder.{l}");
            let n = self.norm_all(&x, &format!("{p}.self_attn_norm"));
            add(&mut x, &self.attention(&format!("{p}.self_attn"), &n, &n, &enc_bias));
            let n = self.norm_all(&x, &format!("{p}.ffn_norm"));
            add(&mut x, &self.ffn(&p, &n));
        }
        self.norm_all(&x, "encoder.final_norm")
    }

    fn decoder(&self, memory: &[Vec<f64>], dec: &[u32]) -> Vec<Vec<f64>> {
        let c = self.params.config();
        let d = c.d_model;
        let mut y = self.embed(dec);
        let dec_bias = |hh: usize, i: usize, j: usize| {
            (j <= i).then(|| {
                self.table(
                    "decoder.rel_bias",
                    bucket(j as i64 - i as i64, c.rel_pos_buckets, c.rel_pos_max_distance, false),
                    hh,
                )
            })
        };
        let no_bias = |_: usize, _: usize, _: usize| Some(0.0);
        for l in 0..c.n_dec_layers {
            let p = format!("decoder.{l}");
            let n = self.norm_all(&y, &format!("{p}.self_attn_norm"));
            add(&mut y, &self.attention(&format!("{p}.self_attn"), &n, &n, &dec_bias));
            let n = self.norm_all(&y, &format!("{p}.cross_attn_norm"));
            add(&mut y, &self.attention(&format!("{p}.cross_attn"), &n, memory, &no_bias));
            let n = self.norm_all(&y, &format!("{p}.ffn_norm"));
            add(&mut y, &self.ffn(&p, &n));
        }
        let out = self.norm_all(&y, "decoder.final_norm");
        let e = self.raw("shared.embedding");
        out.iter()
            .map(|r| {
                (0..c.vocab_size)
                    .map(|tok| (0..d).map(|t| r[t] * e[tok * d + t]).sum::<f64>() / (d as f64).sqrt())
                    .collect()
            })
            .collect()
    }
}

/// Final encoder states `[len][d_model]` for one sequence.
pub fn scalar_encoder(params: &ModelParams, enc: &[u32]) -> Vec<Vec<f64>> {
    Scalar { params }.encoder(enc)
}

/// Single-sequence reference forward pass. Returns `[dec_len][vocab]`.
pub fn scalar_logits(params: &ModelParams, enc: &[u32], dec: &[u32]) -> Vec<Vec<f64>> {
    let s = Scalar { params };
    s.decoder(&s.encoder(enc), dec)
}

/// Greedy decoding by full recomputation: the decoder reruns on the whole
/// prefix at every step. Returns generated ids without eos.
pub fn scalar_greedy(params: &ModelParams, enc: &[u32], max_len: usize, eos: u32) -> Vec<u32> {
    let s = Scalar { params };
    let memory = s.encoder(enc);
    let mut dec = vec![0u32];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = s.decoder(&memory, &dec);
        let last = logits.last().unwrap();
        let mut best = 0;
        for (i, x) in last.iter().enumerate() {
            if *x > last[best] {
                best = i;
            }
        }
        if best as u32 == eos {
            break;
        }
        out.push(best as u32);
        dec.push(best as u32);
    }
    out
}

/// Rebuilds the original sequence from a corrupted pair by walking the
/// input and splicing in the target segment that follows each sentinel.
/// `is_sentinel` identifies sentinel ids; `eos` ends the target.
pub fn decorrupt(input: &[u32], target: &[u32], is_sentinel: &dyn Fn(u32) -> bool, eos: u32) -> Option<Vec<u32>> {
    let body = target.strip_suffix(&[eos])?;
    let mut segments: HashMap<u32, &[u32]> = HashMap::new();
    let mut i = 0;
    while i < body.len() {
        let s = body[i];
        if !is_sentinel(s) {
            return None;
        }
        let mut j = i + 1;
        while j < body.len() && !is_sentinel(body[j]) {
            j += 1;
        }
        if segments.insert(s, &body[i + 1..j]).is_some() {
            return None;
        }
        i = j;
    }
    let mut out = Vec::new();
    for &t in input {
        if is_sentinel(t) {
            out.extend_from_slice(segments.remove(&t)?);
        } else {
            out.push(t);
        }
    }
    segments.is_empty().then_some(out)
}

/// Every complete output of a decoder over `vocab` tokens: sequences that end
/// in eos within `max_len` tokens, plus eos-free sequences of exactly
/// `max_len`. Returns `(ids without eos, finished, log-prob)` with the
/// log-prob summed left to right.
pub fn enumerate_outputs(
    vocab: usize,
    max_len: usize,
    eos: u32,
    log_probs: &dyn Fn(&[u32]) -> Vec<f64>,
) -> Vec<(Vec<u32>, bool, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
    while let Some((prefix, lp)) = stack.pop() {
        if prefix.len() == max_len {
            out.push((prefix, false, lp));
            continue;
        }
        let dist = log_probs(&prefix);
        for tok in 0..vocab as u32 {
            let score = lp + dist[tok as usize];
            if tok == eos {
                out.push((prefix.clone(), true, score));
            } else {
                let mut next = prefix.clone();
                next.push(tok);
                stack.push((next, score));
            }
        }
    }
    out
}

/// Best output under `log_prob / len^alpha` with ties going to the smaller
/// id sequence (eos included), by a linear scan.
pub fn exhaustive_best(candidates: &[(Vec<u32>, bool, f64)], alpha: f64, eos: u32) -> (Vec<u32>, bool, f64) {
    let full = |c: &(Vec<u32>, bool, f64)| {
        let mut v = c.0.clone();
        if c.1 {
            v.push(eos);
        }
        v
    };
    let score = |c: &(Vec<u32>, bool, f64)| {
        let len = full(c).len();
        if alpha == 0.0 || len == 0 {
            c.2
        } else {
            c.2 / (len as f64).powf(alpha)
        }
    };
    let mut best = &candidates[0];
    for c in &candidates[1..] {
        let (a, b) = (score(c), score(best));
        if a > b || (a == b && full(c) < full(best)) {
            best = c;
        }
    }
    best.clone()
}

/// All n-grams of `tokens` as owned vectors.
fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

/// Clipped n-gram overlap by pairing each reference n-gram with an unused
/// identical candidate n-gram. Returns (precision, recall, f1).
pub fn brute_rouge_n(cand: &[String], reference: &[String], n: usize) -> (f64, f64, f64) {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let mut used = vec![false; c.len()];
    let mut overlap = 0;
    for g in &r {
        if let Some(k) = (0..c.len()).find(|&k| !used[k] && &c[k] == g) {
            used[k] = true;
            overlap += 1;
        }
    }
    prf(overlap, c.len(), r.len())
}

fn prf(overlap: usize, cand: usize, reference: usize) -> (f64, f64, f64) {
    let p = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
    let r = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// LCS length by trying every subsequence of the shorter input (length
/// must stay small) and keeping the longest that is also a subsequence of
/// the other.
pub fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "exhaustive search is exponential");
    let is_subseq = |sub: &[&String]| {
        let mut it = long.iter();
        sub.iter().all(|x| it.any(|y| y == *x))
    };
    let mut best = 0;
    for mask in 0u32..1 << short.len() {
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

pub fn brute_rouge_l(cand: &[String], reference: &[String]) -> (f64, f64, f64) {
    prf(brute_lcs(cand, reference), cand.len(), reference.len())
}

/// LCS length by memoised recursion from the front, for inputs too long to
/// enumerate.
pub fn memo_lcs(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn memo_rouge_l(cand: &[String], reference: &[String]) -> (f64, f64, f64) {
    prf(memo_lcs(cand, reference), cand.len(), reference.len())
}

/// Cosine similarity with plain loops.
pub fn scalar_cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// Indices of the `k` best scores by repeated selection of the maximum,
/// ties to the lower index.
pub fn argsort_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}
