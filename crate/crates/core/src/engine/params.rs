use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub norm1: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub norm2: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable tensors. Matrices are `input x output` so that a row
/// vector is multiplied on the left. The same struct holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub queries: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub norm_f: Array1<f64>,
    pub w_out: Array2<f64>,
    pub w_feat: Array2<f64>,
}

fn normal(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

impl Params {
    pub(crate) fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let depth = (2.0 * cfg.layers as f64).sqrt();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let tok_emb = normal(rng, (cfg.vocab_size(), d), 1.0);
        let pos_emb = normal(rng, (cfg.max_positions, d), 0.5);
        let queries = normal(rng, (cfg.queries, d), 1.0);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                norm1: Array1::ones(d),
                wq: normal(rng, (d, d), fan(d)),
                wk: normal(rng, (d, d), fan(d)),
                wv: normal(rng, (d, d), fan(d)),
                wo: normal(rng, (d, d), fan(d) / depth),
                norm2: Array1::ones(d),
                w1: normal(rng, (d, f), fan(d)),
                b1: Array1::zeros(f),
                w2: normal(rng, (f, d), fan(f) / depth),
                b2: Array1::zeros(d),
            })
            .collect();
        Params {
            tok_emb,
            pos_emb,
            queries,
            layers,
            norm_f: Array1::ones(d),
            w_out: normal(rng, (d, cfg.vocab_size()), fan(d)),
            w_feat: normal(rng, (d, cfg.seq.d_feat), fan(d)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `(name, shape, row-major data)` for every tensor, in file order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn m(name: String, a: &Array2<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        fn v(name: String, a: &Array1<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let mut out = vec![
            m("tok_emb".into(), &self.tok_emb),
            m("pos_emb".into(), &self.pos_emb),
            m("queries".into(), &self.queries),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                v(p("norm1"), &l.norm1),
                m(p("wq"), &l.wq),
                m(p("wk"), &l.wk),
                m(p("wv"), &l.wv),
                m(p("wo"), &l.wo),
                v(p("norm2"), &l.norm2),
                m(p("w1"), &l.w1),
                v(p("b1"), &l.b1),
                m(p("w2"), &l.w2),
                v(p("b2"), &l.b2),
            ]);
        }
        out.extend([
            v("norm_f".into(), &self.norm_f),
            m("w_out".into(), &self.w_out),
            m("w_feat".into(), &self.w_feat),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        fn m(name: String, a: &mut Array2<f64>) -> (String, Vec<usize>, &mut [f64]) {
            let shape = a.shape().to_vec();
            (name, shape, a.as_slice_mut().expect("standard layout"))
        }
        fn v(name: String, a: &mut Array1<f64>) -> (String, Vec<usize>, &mut [f64]) {
            let shape = a.shape().to_vec();
            (name, shape, a.as_slice_mut().expect("standard layout"))
        }
        let mut out = vec![
            m("tok_emb".into(), &mut self.tok_emb),
            m("pos_emb".into(), &mut self.pos_emb),
            m("queries".into(), &mut self.queries),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                v(p("norm1"), &mut l.norm1),
                m(p("wq"), &mut l.wq),
                m(p("wk"), &mut l.wk),
                m(p("wv"), &mut l.wv),
                m(p("wo"), &mut l.wo),
                v(p("norm2"), &mut l.norm2),
                m(p("w1"), &mut l.w1),
                v(p("b1"), &mut l.b1),
                m(p("w2"), &mut l.w2),
                v(p("b2"), &mut l.b2),
            ]);
        }
        out.extend([
            v("norm_f".into(), &mut self.norm_f),
            m("w_out".into(), &mut self.w_out),
            m("w_feat".into(), &mut self.w_feat),
        ]);
        out
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn scaled_add(&mut self, alpha: f64, other: &Params) {
        for ((_, _, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += alpha * b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
