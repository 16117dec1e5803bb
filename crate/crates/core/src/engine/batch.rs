//! Whole-sequence causal forward pass with a tape, and its backward pass.
//!
//! Rows `0..T` are the sequence tokens at positions `0..T`; rows `T..T+Q` are
//! the learnable queries, which see keys `0..=boi` of one image block and are
//! never seen by other rows. Under dense retention this computes the same
//! function as repeated [`Model::forward_step`] calls.

use ndarray::{s, Array1, Array2, Axis};

use super::{rms_norm, sigmoid, silu, softmax_in_place, LayerParams, Model, Params};
use crate::seqmodel::Token;
use crate::{Error, Result};

struct LayerTape {
    x_in: Array2<f64>,
    inv1: Vec<f64>,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `probs[head][row]`, over keys `0..limit(row)`.
    probs: Vec<Vec<Vec<f64>>>,
    o: Array2<f64>,
    x_mid: Array2<f64>,
    inv2: Vec<f64>,
    h2: Array2<f64>,
    a: Array2<f64>,
    z: Array2<f64>,
}

pub struct BatchForward {
    ids: Vec<usize>,
    seq_len: usize,
    query_limit: usize,
    layers: Vec<LayerTape>,
    x_final: Array2<f64>,
    inv_f: Vec<f64>,
    hf: Array2<f64>,
    /// `T x V`; row `i` predicts token `i + 1`.
    pub logits: Array2<f64>,
    /// `Q x d_feat`; empty when no image block was given.
    pub features: Array2<f64>,
}

impl BatchForward {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Full causal attention map of sequence rows for one (layer, head),
    /// zero-padded to `T x T`.
    pub fn attention_map(&self, layer: usize, head: usize) -> Vec<Vec<f64>> {
        let t = self.seq_len;
        self.layers[layer].probs[head][..t]
            .iter()
            .map(|row| {
                let mut full = row.clone();
                full.resize(t, 0.0);
                full
            })
            .collect()
    }
}

fn norm_rows(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = Array2::zeros(x.raw_dim());
    let mut invs = Vec::with_capacity(x.nrows());
    for (xr, mut or) in x.outer_iter().zip(out.outer_iter_mut()) {
        invs.push(rms_norm(
            xr.as_slice().unwrap(),
            gain.as_slice().unwrap(),
            or.as_slice_mut().unwrap(),
        ));
    }
    (out, invs)
}

/// Backward of `y = gain * x * inv` for every row; accumulates `d_gain` and
/// returns `dx`.
fn norm_rows_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    invs: &[f64],
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for r in 0..x.nrows() {
        let (xr, dyr, inv) = (x.row(r), dy.row(r), invs[r]);
        let u = &dyr * gain;
        let ux: f64 = u.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
        for j in 0..x.ncols() {
            d_gain[j] += dyr[j] * xr[j] * inv;
            dx[[r, j]] = inv * u[j] - inv * inv * inv * xr[j] * ux / d;
        }
    }
    dx
}

pub fn forward(model: &Model, tokens: &[Token], query_boi: Option<usize>) -> Result<BatchForward> {
    let cfg = &model.config;
    let p = &model.params;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    if t > cfg.max_positions {
        return Err(Error::Contract(format!(
            "sequence of {t} tokens exceeds position table of {}",
            cfg.max_positions
        )));
    }
    let (nq, query_limit) = match query_boi {
        Some(b) if b < t && tokens[b] == Token::Boi => (cfg.queries, b + 1),
        Some(b) => return Err(Error::Contract(format!("no BoI at position {b}"))),
        None => (0, 0),
    };
    let ids = tokens
        .iter()
        .map(|&tok| cfg.seq.check_token(tok).map(|_| cfg.seq.token_id(tok)))
        .collect::<Result<Vec<_>>>()?;
    let rows = t + nq;
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let limit = |r: usize| if r < t { r + 1 } else { query_limit };

    let mut x = Array2::zeros((rows, d));
    for (r, &id) in ids.iter().enumerate() {
        let e = &p.tok_emb.row(id) + &p.pos_emb.row(r);
        x.row_mut(r).assign(&e);
    }
    if nq > 0 {
        x.slice_mut(s![t.., ..]).assign(&p.queries);
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for lp in &p.layers {
        let (h1, inv1) = norm_rows(&x, &lp.norm1);
        let q = h1.dot(&lp.wq);
        let main = h1.slice(s![..t, ..]);
        let k = main.dot(&lp.wk);
        let v = main.dot(&lp.wv);
        let mut o = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let cols = hd * dh..(hd + 1) * dh;
            let mut head_probs = Vec::with_capacity(rows);
            for r in 0..rows {
                let qr = q.slice(s![r, cols.clone()]);
                let mut sc: Vec<f64> = (0..limit(r))
                    .map(|j| scale * qr.dot(&k.slice(s![j, cols.clone()])))
                    .collect();
                softmax_in_place(&mut sc);
                let mut acc = o.slice_mut(s![r, cols.clone()]);
                for (j, &pj) in sc.iter().enumerate() {
                    acc.scaled_add(pj, &v.slice(s![j, cols.clone()]));
                }
                head_probs.push(sc);
            }
            probs.push(head_probs);
        }
        let x_mid = &x + &o.dot(&lp.wo);
        let (h2, inv2) = norm_rows(&x_mid, &lp.norm2);
        let a = h2.dot(&lp.w1) + &lp.b1;
        let z = a.mapv(silu);
        let x_out = &x_mid + &(z.dot(&lp.w2) + &lp.b2);
        layers.push(LayerTape {
            x_in: std::mem::replace(&mut x, x_out),
            inv1,
            h1,
            q,
            k,
            v,
            probs,
            o,
            x_mid,
            inv2,
            h2,
            a,
            z,
        });
    }
    let (hf, inv_f) = norm_rows(&x, &p.norm_f);
    let logits = hf.slice(s![..t, ..]).dot(&p.w_out);
    let features = hf.slice(s![t.., ..]).dot(&p.w_feat);
    if logits.iter().chain(features.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward outputs".into()));
    }
    Ok(BatchForward {
        ids,
        seq_len: t,
        query_limit,
        layers,
        x_final: x,
        inv_f,
        hf,
        logits,
        features,
    })
}

fn layer_backward(
    cfg: &super::ModelConfig,
    lp: &LayerParams,
    tape: &LayerTape,
    gl: &mut LayerParams,
    dx: Array2<f64>,
    seq_len: usize,
    query_limit: usize,
) -> Array2<f64> {
    let (rows, dh) = (dx.nrows(), cfg.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let limit = |r: usize| if r < seq_len { r + 1 } else { query_limit };

    // Feed-forward residual branch.
    gl.w2 += &tape.z.t().dot(&dx);
    gl.b2 += &dx.sum_axis(Axis(0));
    let dz = dx.dot(&lp.w2.t());
    let da = &dz
        * &tape.a.mapv(|a| {
            let s = sigmoid(a);
            s * (1.0 + a * (1.0 - s))
        });
    gl.w1 += &tape.h2.t().dot(&da);
    gl.b1 += &da.sum_axis(Axis(0));
    let dh2 = da.dot(&lp.w1.t());
    let dx_mid = &dx + &norm_rows_backward(&dh2, &tape.x_mid, &tape.inv2, &lp.norm2, &mut gl.norm2);

    // Attention residual branch.
    gl.wo += &tape.o.t().dot(&dx_mid);
    let d_o = dx_mid.dot(&lp.wo.t());
    let mut dq = Array2::<f64>::zeros(tape.q.raw_dim());
    let mut dk = Array2::<f64>::zeros(tape.k.raw_dim());
    let mut dv = Array2::<f64>::zeros(tape.v.raw_dim());
    for hd in 0..cfg.heads {
        let cols = hd * dh..(hd + 1) * dh;
        for r in 0..rows {
            let probs = &tape.probs[hd][r];
            let dor = d_o.slice(s![r, cols.clone()]);
            let dp: Vec<f64> = (0..limit(r))
                .map(|j| dor.dot(&tape.v.slice(s![j, cols.clone()])))
                .collect();
            let dot: f64 = probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let qr = tape.q.slice(s![r, cols.clone()]).to_owned();
            for j in 0..limit(r) {
                dv.slice_mut(s![j, cols.clone()]).scaled_add(probs[j], &dor);
                let ds = probs[j] * (dp[j] - dot) * scale;
                dq.slice_mut(s![r, cols.clone()])
                    .scaled_add(ds, &tape.k.slice(s![j, cols.clone()]));
                dk.slice_mut(s![j, cols.clone()]).scaled_add(ds, &qr);
            }
        }
    }
    let main = tape.h1.slice(s![..seq_len, ..]);
    gl.wq += &tape.h1.t().dot(&dq);
    gl.wk += &main.t().dot(&dk);
    gl.wv += &main.t().dot(&dv);
    let mut dh1 = dq.dot(&lp.wq.t());
    let dkv = dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
    dh1.slice_mut(s![..seq_len, ..]).scaled_add(1.0, &dkv);
    dx_mid + norm_rows_backward(&dh1, &tape.x_in, &tape.inv1, &lp.norm1, &mut gl.norm1)
}

/// Gradients of a scalar loss given its derivatives with respect to the
/// logits (`T x V`) and the query features (`Q x d_feat`).
pub fn backward(
    model: &Model,
    fwd: &BatchForward,
    d_logits: &Array2<f64>,
    d_features: Option<&Array2<f64>>,
) -> Result<Params> {
    let cfg = &model.config;
    let p = &model.params;
    let t = fwd.seq_len;
    let nq = fwd.hf.nrows() - t;
    if d_logits.dim() != fwd.logits.dim() {
        return Err(Error::Contract("d_logits shape mismatch".into()));
    }
    if let Some(df) = d_features {
        if df.dim() != fwd.features.dim() {
            return Err(Error::Contract("d_features shape mismatch".into()));
        }
    }
    let mut g = p.zeros_like();
    let mut dhf = Array2::zeros(fwd.hf.raw_dim());
    g.w_out += &fwd.hf.slice(s![..t, ..]).t().dot(d_logits);
    dhf.slice_mut(s![..t, ..]).assign(&d_logits.dot(&p.w_out.t()));
    if let Some(df) = d_features {
        g.w_feat += &fwd.hf.slice(s![t.., ..]).t().dot(df);
        dhf.slice_mut(s![t.., ..]).assign(&df.dot(&p.w_feat.t()));
    }
    let mut dx = norm_rows_backward(&dhf, &fwd.x_final, &fwd.inv_f, &p.norm_f, &mut g.norm_f);
    for l in (0..cfg.layers).rev() {
        dx = layer_backward(
            cfg,
            &p.layers[l],
            &fwd.layers[l],
            &mut g.layers[l],
            dx,
            t,
            fwd.query_limit,
        );
    }
    for (r, &id) in fwd.ids.iter().enumerate() {
        let row = dx.row(r);
        g.tok_emb.row_mut(id).scaled_add(1.0, &row);
        g.pos_emb.row_mut(r).scaled_add(1.0, &row);
    }
    if nq > 0 {
        g.queries += &dx.slice(s![t.., ..]);
    }
    Ok(g)
}
