//! Slow reference implementations for tests. Nothing here calls into the
//! algorithms it checks; only plain data types are shared.

use std::collections::{BTreeMap, HashMap};

use mmsink_core::attnstats::AttentionRecord;
use mmsink_core::{CachePolicy, Model, Token};
use rand::Rng;

/// `(boi, eoi)` of every block that reads BoI, Img 0..m-1 in order, EoI.
fn complete_blocks(tokens: &[Token], m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for b in 0..tokens.len() {
        if tokens[b] != Token::Boi || b + m + 1 >= tokens.len() {
            continue;
        }
        let slots_ok = (0..m).all(|j| tokens[b + 1 + j] == Token::Img(j as u16));
        if slots_ok && tokens[b + m + 1] == Token::Eoi {
            out.push((b, b + m + 1));
        }
    }
    out
}

/// Start of the trailing unfinished block: a BoI followed only by the
/// leading image slots in order.
fn unfinished_block(tokens: &[Token], m: usize) -> Option<usize> {
    let b = tokens.iter().rposition(|&t| t == Token::Boi)?;
    let tail = &tokens[b + 1..];
    let ok = tail.len() <= m && tail.iter().enumerate().all(|(j, &t)| t == Token::Img(j as u16));
    ok.then_some(b)
}

/// Retained positions of the first `t` tokens, by testing each position.
pub fn brute_retain_set(policy: &CachePolicy, tokens: &[Token], m: usize, t: usize) -> Vec<usize> {
    assert!(t >= 1 && t <= tokens.len(), "t out of range");
    let prefix = &tokens[..t];
    let blocks = complete_blocks(prefix, m);
    let open = unfinished_block(prefix, m);
    let keep = |p: usize| -> bool {
        match *policy {
            CachePolicy::Dense => true,
            CachePolicy::Window { window } => t <= window || p + window >= t,
            CachePolicy::AttentionSink { n_sink, window } => {
                t <= window || p < n_sink || p + (window - n_sink) >= t
            }
            CachePolicy::MultimodalSink {
                n_sink,
                k_head,
                k_tail,
                window,
            } => {
                if t <= window || p < n_sink || p + (window - n_sink) >= t {
                    return true;
                }
                let anchor = blocks.iter().any(|&(b, e)| {
                    p == b || p == e || (p > b && p <= b + k_head) || (p < e && p + k_tail >= e)
                });
                anchor || open.is_some_and(|b| p >= b)
            }
        }
    };
    (0..t).filter(|&p| keep(p)).collect()
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>, String> {
    if !(eps > 0.0) {
        return Err(format!("eps must be positive, got {eps}"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(format!("non-finite evaluation at coordinate {i}"));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

fn vocab_index(token: Token, m: usize) -> usize {
    match token {
        Token::Bos => 0,
        Token::Eos => 1,
        Token::Boi => 2,
        Token::Eoi => 3,
        Token::Img(j) => 4 + j as usize,
        Token::Punct(c) => 4 + m + c as usize,
        Token::Text(w) => 4 + m + 5 + w as usize,
    }
}

fn norm(x: &[f64], g: &[f64]) -> Vec<f64> {
    let mut ss = 0.0;
    for v in x {
        ss += v * v;
    }
    let r = 1.0 / (ss / x.len() as f64 + 1e-5).sqrt();
    (0..x.len()).map(|i| x[i] * r * g[i]).collect()
}

fn matvec(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut y = vec![0.0; w.cols];
    for i in 0..w.rows {
        for j in 0..w.cols {
            y[j] += x[i] * w.at(i, j);
        }
    }
    y
}

/// Row-major view of a parameter tensor.
struct Mat<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

impl<'a> Mat<'a> {
    fn new(shape: &[usize], data: &'a [f64]) -> Self {
        Mat {
            rows: shape[0],
            cols: shape[1],
            data,
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Logits of every step when step `i` attends to the positions in
/// `retain(i + 1)`, which must contain `i`. Each token's position index is
/// its rank in that set. Recomputed from scratch with plain loops.
pub fn naive_logits(
    model: &Model,
    tokens: &[Token],
    mut retain: impl FnMut(usize) -> Vec<usize>,
) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let m = cfg.seq.image_block_len;
    let (d, heads) = (cfg.d_model, cfg.heads);
    let dh = d / heads;
    let tensors: HashMap<String, (Vec<usize>, &[f64])> = model
        .params
        .tensors()
        .into_iter()
        .map(|(n, s, v)| (n, (s, v)))
        .collect();
    let vec_of = |name: &str| tensors[name].1;
    let mat_of = |name: &str| Mat::new(&tensors[name].0, tensors[name].1);

    // keys[l][pos], values[l][pos]
    let mut keys: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.layers];
    let mut values: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.layers];
    let mut out = Vec::new();
    for (i, &tok) in tokens.iter().enumerate() {
        let set = retain(i + 1);
        let rank = set.iter().position(|&p| p == i).expect("step must see itself");
        let emb = mat_of("tok_emb");
        let pos = mat_of("pos_emb");
        let mut x: Vec<f64> = (0..d)
            .map(|j| emb.at(vocab_index(tok, m), j) + pos.at(rank, j))
            .collect();
        for l in 0..cfg.layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            let h = norm(&x, vec_of(&name("norm1")));
            let q = matvec(&h, &mat_of(&name("wq")));
            keys[l].push(matvec(&h, &mat_of(&name("wk"))));
            values[l].push(matvec(&h, &mat_of(&name("wv"))));
            let mut o = vec![0.0; d];
            for hd in 0..heads {
                let lo = hd * dh;
                let scores: Vec<f64> = set
                    .iter()
                    .map(|&p| {
                        let mut s = 0.0;
                        for j in 0..dh {
                            s += q[lo + j] * keys[l][p][lo + j];
                        }
                        s / (dh as f64).sqrt()
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = ex.iter().sum();
                for (k, &p) in set.iter().enumerate() {
                    for j in 0..dh {
                        o[lo + j] += ex[k] / z * values[l][p][lo + j];
                    }
                }
            }
            let proj = matvec(&o, &mat_of(&name("wo")));
            for j in 0..d {
                x[j] += proj[j];
            }
            let h = norm(&x, vec_of(&name("norm2")));
            let mut a = matvec(&h, &mat_of(&name("w1")));
            let b1 = vec_of(&name("b1"));
            for (j, v) in a.iter_mut().enumerate() {
                let u = *v + b1[j];
                *v = u / (1.0 + (-u).exp());
            }
            let f = matvec(&a, &mat_of(&name("w2")));
            let b2 = vec_of(&name("b2"));
            for j in 0..d {
                x[j] += f[j] + b2[j];
            }
        }
        let h = norm(&x, vec_of("norm_f"));
        out.push(matvec(&h, &mat_of("w_out")));
    }
    out
}

/// Logits of full causal attention over the whole prefix.
pub fn naive_dense_logits(model: &Model, tokens: &[Token]) -> Vec<Vec<f64>> {
    naive_logits(model, tokens, |t| (0..t).collect())
}

/// Per-label count of the maps whose `k` most-attended keys include the
/// label, recomputed without the attnstats helpers.
pub fn recount_occurrence(records: &[AttentionRecord], k: usize) -> BTreeMap<String, usize> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for rec in records {
        let n = rec.labels.len();
        let mut means = vec![0.0; n];
        for j in 0..n {
            for row in &rec.rows {
                means[j] += row[j];
            }
            means[j] /= rec.rows.len() as f64;
        }
        let mut taken = vec![false; n];
        let mut seen: Vec<&str> = Vec::new();
        for _ in 0..k.min(n) {
            let mut best = None;
            for j in 0..n {
                if taken[j] {
                    continue;
                }
                match best {
                    Some(b) if means[j] <= means[b] => {}
                    _ => best = Some(j),
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            if !seen.contains(&rec.labels[b].as_str()) {
                seen.push(&rec.labels[b]);
            }
        }
        for l in seen {
            *counts.entry(l.to_string()).or_insert(0) += 1;
        }
    }
    counts.into_iter().collect()
}

/// Random interleaved sequence of `len` tokens with blocks of `m` slots.
/// With `corrupt > 0` some blocks are cut short and stray image tokens
/// appear, which only lenient parsing accepts.
pub fn random_tokens(rng: &mut impl Rng, m: usize, len: usize, corrupt: f64) -> Vec<Token> {
    let mut toks = vec![Token::Bos];
    while toks.len() < len {
        if rng.random_bool(0.35) {
            toks.push(Token::Boi);
            let upto = if rng.random_bool(corrupt) { rng.random_range(0..m) } else { m };
            toks.extend((0..upto).map(|j| Token::Img(j as u16)));
            if upto == m {
                toks.push(Token::Eoi);
            }
        } else {
            for _ in 0..rng.random_range(1..8) {
                toks.push(if rng.random_bool(0.2) {
                    Token::Punct(rng.random_range(0..5))
                } else {
                    Token::Text(rng.random_range(0..16))
                });
            }
        }
        if rng.random_bool(corrupt) {
            toks.push(match rng.random_range(0..3) {
                0 => Token::Img(rng.random_range(0..m as u16)),
                1 => Token::Eoi,
                _ => Token::Eos,
            });
        }
    }
    toks.truncate(len);
    toks
}

/// Random policy of each kind with `m`-slot blocks, round robin on `kind`.
pub fn random_policy(rng: &mut impl Rng, m: usize, kind: usize) -> CachePolicy {
    let window = rng.random_range(2..40);
    let n_sink = rng.random_range(1..window.min(6));
    let k_head = rng.random_range(1..m);
    let k_tail = rng.random_range(1..=m - k_head);
    match kind % 4 {
        0 => CachePolicy::Dense,
        1 => CachePolicy::Window { window },
        2 => CachePolicy::AttentionSink { n_sink, window },
        _ => CachePolicy::MultimodalSink {
            n_sink,
            k_head,
            k_tail,
            window,
        },
    }
}
