use ndarray::{Array1, ArrayView1};

use super::{rms_norm, silu, softmax_in_place, Model};
use crate::cachepolicy::KvCache;
use crate::seqmodel::Token;
use crate::{Error, Result};

/// Result of decoding one token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// Final normed hidden state.
    pub hidden: Vec<f64>,
    /// Cache position the token was embedded at.
    pub cache_pos: usize,
    /// Original positions of the keys attended to, ascending; the last one is
    /// the token itself.
    pub key_positions: Vec<usize>,
    /// One row per `(layer, head)`, `layer * heads + head`, aligned with
    /// `key_positions`. Empty unless requested.
    pub attention: Vec<Vec<f64>>,
}

/// Attention of one query over `n` cached keys plus an optional extra
/// key/value (the query token itself). Writes the head output into `out`.
fn attend(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    extra: Option<(&[f64], &[f64])>,
    scale: f64,
    out: &mut [f64],
) -> Vec<f64> {
    let d = q.len();
    let n = keys.len() / d;
    let mut scores: Vec<f64> = keys
        .chunks_exact(d)
        .map(|k| scale * k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    if let Some((k, _)) = extra {
        scores.push(scale * k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>());
    }
    softmax_in_place(&mut scores);
    out.fill(0.0);
    for (p, v) in scores[..n].iter().zip(values.chunks_exact(d)) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
    if let Some((_, v)) = extra {
        let p = scores[n];
        for (o, x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
    scores
}

fn ffn(model: &Model, layer: usize, x: &mut Array1<f64>) {
    let lp = &model.params.layers[layer];
    let mut h = vec![0.0; x.len()];
    rms_norm(x.as_slice().unwrap(), lp.norm2.as_slice().unwrap(), &mut h);
    let mut a = ArrayView1::from(&h).dot(&lp.w1) + &lp.b1;
    a.mapv_inplace(silu);
    *x += &(a.dot(&lp.w2) + &lp.b2);
}

impl Model {
    /// Decodes `token` against `cache`: evicts per the cache policy, attends
    /// over the retained entries plus the token itself, then stores the
    /// token's keys and values. On error the cache must be discarded.
    pub fn forward_step(
        &self,
        cache: &mut KvCache,
        token: Token,
        record_attention: bool,
    ) -> Result<StepOutput> {
        let cfg = &self.config;
        cfg.seq.check_token(token)?;
        if cache.dims() != cfg.cache_dims() {
            return Err(Error::Contract(format!(
                "cache dims {:?} do not match model {:?}",
                cache.dims(),
                cfg.cache_dims()
            )));
        }
        let (cache_pos, _) = cache.prepare(token)?;
        if cache_pos >= cfg.max_positions {
            return Err(Error::Contract(format!(
                "cache position {cache_pos} exceeds position table of {}",
                cfg.max_positions
            )));
        }
        let p = &self.params;
        let (d, dh, heads) = (cfg.d_model, cfg.d_head(), cfg.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let id = cfg.seq.token_id(token);
        let mut x = &p.tok_emb.row(id) + &p.pos_emb.row(cache_pos);

        let mut keys = Vec::with_capacity(cfg.layers);
        let mut values = Vec::with_capacity(cfg.layers);
        let mut attention = Vec::new();
        let mut h = vec![0.0; d];
        let mut o = vec![0.0; d];
        for (l, lp) in p.layers.iter().enumerate() {
            rms_norm(x.as_slice().unwrap(), lp.norm1.as_slice().unwrap(), &mut h);
            let hv = ArrayView1::from(&h);
            let q = hv.dot(&lp.wq);
            let k = hv.dot(&lp.wk);
            let v = hv.dot(&lp.wv);
            let (q, k, v) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                let probs = attend(
                    &q[r.clone()],
                    cache.keys(l, hd),
                    cache.values(l, hd),
                    Some((&k[r.clone()], &v[r.clone()])),
                    scale,
                    &mut o[r],
                );
                if record_attention {
                    attention.push(probs);
                }
            }
            x += &ArrayView1::from(&o).dot(&lp.wo);
            ffn(self, l, &mut x);
            keys.push(k.to_vec());
            values.push(v.to_vec());
        }
        let mut hidden = vec![0.0; d];
        rms_norm(x.as_slice().unwrap(), p.norm_f.as_slice().unwrap(), &mut hidden);
        let logits = ArrayView1::from(&hidden).dot(&p.w_out).to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits at step {}", cache.seen() - 1)));
        }
        cache.commit(&keys, &values)?;
        Ok(StepOutput {
            logits,
            hidden,
            cache_pos,
            key_positions: cache.positions().to_vec(),
            attention,
        })
    }

    /// Runs the learnable queries over the cache right after a BoI. Queries
    /// attend to the retained entries only and are not cached. Returns one
    /// `d_feat` row per query.
    pub fn predict_image_features(&self, cache: &KvCache) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.config;
        match cache.history().open() {
            Some(b) if b.next_slot == 0 && b.boi + 1 == cache.seen() => {}
            _ => {
                return Err(Error::State(
                    "image features can only be predicted right after a BoI".into(),
                ))
            }
        }
        if cache.len() != cache.tokens().len() || cache.is_empty() {
            return Err(Error::State("cache has a pending step".into()));
        }
        let p = &self.params;
        let (d, dh) = (cfg.d_model, cfg.d_head());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut out = Vec::with_capacity(cfg.queries);
        for qi in 0..cfg.queries {
            let mut x = p.queries.row(qi).to_owned();
            for (l, lp) in p.layers.iter().enumerate() {
                rms_norm(x.as_slice().unwrap(), lp.norm1.as_slice().unwrap(), &mut h);
                let q = ArrayView1::from(&h).dot(&lp.wq);
                let q = q.as_slice().unwrap();
                for hd in 0..cfg.heads {
                    let r = hd * dh..(hd + 1) * dh;
                    attend(&q[r.clone()], cache.keys(l, hd), cache.values(l, hd), None, scale, &mut o[r]);
                }
                x += &ArrayView1::from(&o).dot(&lp.wo);
                ffn(self, l, &mut x);
            }
            rms_norm(x.as_slice().unwrap(), p.norm_f.as_slice().unwrap(), &mut h);
            out.push(ArrayView1::from(&h).dot(&p.w_feat).to_vec());
        }
        Ok(out)
    }
}
