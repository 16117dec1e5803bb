//! Next-token cross entropy, cosine feature regression, their weighted sum
//! and a plain gradient-descent trainer.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::engine::{batch, softmax_in_place, Model, Params};
use crate::seqmodel::{SeqConfig, TrainingSample};
use crate::{Error, Result};

/// Mean of `-log softmax(row)[target]` over the rows of `logits`.
pub fn text_ce_loss(logits: ArrayView2<f64>, targets: &[usize]) -> Result<f64> {
    text_ce_loss_grad(logits, targets).map(|(l, _)| l)
}

/// Cross entropy and its derivative with respect to `logits`.
pub fn text_ce_loss_grad(logits: ArrayView2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::Contract("cross entropy over an empty mask".into()));
    }
    if logits.nrows() != n {
        return Err(Error::Contract(format!(
            "{} logit rows for {n} targets",
            logits.nrows()
        )));
    }
    let v = logits.ncols();
    let mut grad = Array2::zeros((n, v));
    let mut total = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        if target >= v {
            return Err(Error::Range {
                what: "target",
                value: target as i64,
                range: format!("0..{v}"),
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[target];
        let mut g = grad.row_mut(i);
        for (gj, &x) in g.iter_mut().zip(row.iter()) {
            *gj = (x - lse).exp() / n as f64;
        }
        g[target] -= 1.0 / n as f64;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross entropy".into()));
    }
    Ok((loss, grad))
}

/// Mean over rows of `1 - cos(pred_row, target_row)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineLoss {
    pub loss: f64,
    /// Prediction rows with zero norm; each contributed a loss of 1.
    pub zero_norm_rows: usize,
}

pub fn image_regression_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<CosineLoss> {
    image_regression_loss_grad(pred, target).map(|(l, _)| l)
}

pub fn image_regression_loss_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
) -> Result<(CosineLoss, Array2<f64>)> {
    if pred.dim() != target.dim() || pred.nrows() == 0 {
        return Err(Error::Contract(format!(
            "prediction {:?} and target {:?} shapes differ",
            pred.dim(),
            target.dim()
        )));
    }
    let q = pred.nrows() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut total = 0.0;
    let mut zero_norm_rows = 0;
    for (r, (p, t)) in pred.outer_iter().zip(target.outer_iter()).enumerate() {
        let tn = t.dot(&t).sqrt();
        if tn == 0.0 {
            return Err(Error::Contract(format!("target row {r} has zero norm")));
        }
        let pp = p.dot(&p);
        let pn = pp.sqrt();
        if pn == 0.0 {
            zero_norm_rows += 1;
            total += 1.0;
            continue;
        }
        let cos = (p.dot(&t) / (pp * t.dot(&t)).sqrt()).clamp(-1.0, 1.0);
        total += 1.0 - cos;
        // d(1 - cos)/dp = -(t / (|p||t|) - cos * p / |p|^2)
        let mut g = grad.row_mut(r);
        for ((gj, &pj), &tj) in g.iter_mut().zip(p.iter()).zip(t.iter()) {
            *gj = -(tj / (pn * tn) - cos * pj / (pn * pn)) / q;
        }
    }
    Ok((
        CosineLoss {
            loss: total / q,
            zero_norm_rows,
        },
        grad,
    ))
}

pub fn combined_loss(ce: f64, img: f64, lambda: f64) -> f64 {
    ce + lambda * img
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub img: f64,
    pub combined: f64,
    /// Positions contributing to the cross entropy.
    pub ce_tokens: usize,
    /// Query rows contributing to the regression loss.
    pub img_rows: usize,
    pub zero_norm_rows: usize,
}

/// `(logit row, target id)` for every loss-masked position: the logits at
/// `i - 1` predict token `i`.
pub fn ce_targets(sample: &TrainingSample, seq: &SeqConfig) -> Vec<(usize, usize)> {
    let toks = sample.sequence.tokens();
    (1..toks.len())
        .filter(|&i| sample.loss_mask[i])
        .map(|i| (i - 1, seq.token_id(toks[i])))
        .collect()
}

fn target_matrix(sample: &TrainingSample, queries: usize) -> Result<(usize, Array2<f64>)> {
    let blocks = sample.target_blocks();
    let (&(boi, _), feature) = match (blocks.first(), sample.target_features.first()) {
        (Some(b), Some(f)) if blocks.len() == 1 && sample.target_features.len() == 1 => (b, f),
        _ => {
            return Err(Error::Contract(
                "sample must have exactly one target image block".into(),
            ))
        }
    };
    let d = feature.len();
    let target = Array2::from_shape_fn((queries, d), |(_, j)| feature[j]);
    Ok((boi, target))
}

fn loss_parts(
    model: &Model,
    sample: &TrainingSample,
    lambda: f64,
    want_grad: bool,
) -> Result<(LossReport, Option<Params>)> {
    let cfg = &model.config;
    if sample.sequence.block_len() != cfg.seq.image_block_len {
        return Err(Error::Contract("sample block length differs from model".into()));
    }
    let (boi, target) = target_matrix(sample, cfg.queries)?;
    if target.ncols() != cfg.seq.d_feat {
        return Err(Error::Contract(format!(
            "target feature length {} but model d_feat is {}",
            target.ncols(),
            cfg.seq.d_feat
        )));
    }
    let fwd = batch::forward(model, sample.sequence.tokens(), Some(boi))?;
    let pairs = ce_targets(sample, &cfg.seq);
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ids: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let picked = fwd.logits.select(ndarray::Axis(0), &rows);
    let (ce, ce_grad) = text_ce_loss_grad(picked.view(), &ids)?;
    let (img, img_grad) = image_regression_loss_grad(fwd.features.view(), target.view())?;
    let report = LossReport {
        ce,
        img: img.loss,
        combined: combined_loss(ce, img.loss, lambda),
        ce_tokens: ids.len(),
        img_rows: cfg.queries,
        zero_norm_rows: img.zero_norm_rows,
    };
    if !report.combined.is_finite() {
        return Err(Error::NonFinite("combined loss".into()));
    }
    if !want_grad {
        return Ok((report, None));
    }
    let mut d_logits = Array2::zeros(fwd.logits.raw_dim());
    for (k, &r) in rows.iter().enumerate() {
        let mut dst = d_logits.row_mut(r);
        dst += &ce_grad.row(k);
    }
    let d_features = img_grad * lambda;
    let grads = batch::backward(model, &fwd, &d_logits, Some(&d_features))?;
    Ok((report, Some(grads)))
}

/// Loss of one assembled sample.
pub fn sample_loss(model: &Model, sample: &TrainingSample, lambda: f64) -> Result<LossReport> {
    loss_parts(model, sample, lambda, false).map(|(r, _)| r)
}

/// Loss of one sample and its gradient with respect to every parameter.
pub fn sample_loss_and_grad(
    model: &Model,
    sample: &TrainingSample,
    lambda: f64,
) -> Result<(LossReport, Params)> {
    let (r, g) = loss_parts(model, sample, lambda, true)?;
    Ok((r, g.expect("gradient requested")))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut out = LossReport {
        ce: 0.0,
        img: 0.0,
        combined: 0.0,
        ce_tokens: 0,
        img_rows: 0,
        zero_norm_rows: 0,
    };
    for r in reports {
        out.ce += r.ce / n;
        out.img += r.img / n;
        out.combined += r.combined / n;
        out.ce_tokens += r.ce_tokens;
        out.img_rows += r.img_rows;
        out.zero_norm_rows += r.zero_norm_rows;
    }
    out
}

/// Sample-averaged loss over a dataset, summed in order.
pub fn evaluate(model: &Model, samples: &[TrainingSample], lambda: f64) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples".into()));
    }
    let reports = samples
        .iter()
        .map(|s| sample_loss(model, s, lambda))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Samples per step, drawn without replacement; 0 means all.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 0.1,
            lambda: 1.0,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub ce: f64,
    pub img: f64,
    pub combined: f64,
}

/// Gradient descent on the combined loss. The curve holds the mini-batch
/// loss measured before each update.
pub fn train_toy(
    model: &Model,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<(Model, Vec<LossPoint>)> {
    if samples.is_empty() {
        return Err(Error::Contract("train_toy needs at least one sample".into()));
    }
    if cfg.steps == 0 {
        return Err(Error::Contract("train_toy needs at least one step".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lambda >= 0.0) {
        return Err(Error::Config("lr and lambda must be non-negative".into()));
    }
    let mut model = model.clone();
    let longest = samples.iter().map(|s| s.sequence.len()).max().unwrap_or(0);
    model.trained_len = Some(model.trained_len.unwrap_or(0).max(longest));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = if cfg.batch_size == 0 {
        samples.len()
    } else {
        cfg.batch_size.min(samples.len())
    };
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx: Vec<usize> = sample(&mut rng, samples.len(), batch).into_vec();
        idx.sort_unstable();
        let mut grad = model.params.zeros_like();
        let mut reports = Vec::with_capacity(batch);
        for &i in &idx {
            let (r, g) = sample_loss_and_grad(&model, &samples[i], cfg.lambda).map_err(|e| {
                Error::NonFinite(format!("step {step}, sample {i}: {e}"))
            })?;
            grad.scaled_add(1.0 / batch as f64, &g);
            reports.push(r);
        }
        let r = mean_report(&reports);
        curve.push(LossPoint {
            step,
            ce: r.ce,
            img: r.img,
            combined: r.combined,
        });
        model.params.scaled_add(-cfg.lr, &grad);
        if !model.params.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after step {step} (loss {:.6})",
                r.combined
            )));
        }
    }
    Ok((model, curve))
}

/// Writes `step,ce,img,combined`.
pub fn write_loss_curve(curve: &[LossPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,ce,img,combined\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.step, p.ce, p.img, p.combined));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Softmax probabilities of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ModelConfig;
    use crate::seqmodel::{assemble_training_sequence, synth_stories};
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Array2::<f64>::zeros((1, 8));
        let l = text_ce_loss(logits.view(), &[3]).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        assert!((l - 2.07944).abs() < 1e-5);
    }

    #[test]
    fn large_margin_gives_near_zero() {
        let mut logits = Array2::<f64>::zeros((1, 8));
        logits[[0, 2]] = 30.0;
        assert!(text_ce_loss(logits.view(), &[2]).unwrap() < 1e-9);
    }

    #[test]
    fn ce_is_mean_over_positions() {
        let a = array![[0.3, -1.0, 2.0]];
        let b = array![[1.5, 0.0, -0.5]];
        let la = text_ce_loss(a.view(), &[0]).unwrap();
        let lb = text_ce_loss(b.view(), &[2]).unwrap();
        let both = array![[0.3, -1.0, 2.0], [1.5, 0.0, -0.5]];
        let l = text_ce_loss(both.view(), &[0, 2]).unwrap();
        assert!((l - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ce_errors() {
        let logits = Array2::<f64>::zeros((0, 4));
        assert!(matches!(text_ce_loss(logits.view(), &[]), Err(Error::Contract(_))));
        let logits = Array2::<f64>::zeros((1, 4));
        assert!(text_ce_loss(logits.view(), &[4]).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let t = array![[3.0, 4.0, 0.0], [0.0, 0.0, 2.5]];
        assert_eq!(image_regression_loss(t.view(), t.view()).unwrap().loss, 0.0);
        let orth = array![[-4.0, 3.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(image_regression_loss(orth.view(), t.view()).unwrap().loss, 1.0);
        let anti = -&t;
        assert_eq!(image_regression_loss(anti.view(), t.view()).unwrap().loss, 2.0);
    }

    #[test]
    fn zero_norm_prediction_counts_as_one() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let p = array![[0.0, 0.0], [0.0, 1.0]];
        let l = image_regression_loss(p.view(), t.view()).unwrap();
        assert_eq!(l.zero_norm_rows, 1);
        assert!((l.loss - 0.5).abs() < 1e-12);
        let z = array![[0.0, 0.0], [0.0, 1.0]];
        assert!(image_regression_loss(t.view(), z.view()).is_err());
        let short = array![[1.0, 0.0]];
        assert!(image_regression_loss(short.view(), t.view()).is_err());
    }

    #[test]
    fn combined_arithmetic() {
        assert_eq!(combined_loss(2.0, 0.5, 1.0), 2.5);
        assert_eq!(combined_loss(2.0, 0.5, 0.0), 2.0);
        assert_eq!(combined_loss(2.0, 0.0, 3.0), 2.0);
    }

    fn tiny_samples(n: usize) -> (Model, Vec<TrainingSample>) {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let samples = synth_stories(n, 3, 2, m.config.seq.d_feat)
            .iter()
            .map(|s| assemble_training_sequence(s, 2, &m.config.seq).unwrap())
            .collect();
        (m, samples)
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let (m, samples) = tiny_samples(2);
        let cfg = TrainConfig {
            steps: 3,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let (trained, curve) = train_toy(&m, &samples, &cfg).unwrap();
        assert_eq!(trained.params, m.params);
        let longest = samples.iter().map(|s| s.sequence.len()).max();
        assert_eq!(trained.trained_len, longest);
        assert_eq!(curve.len(), 3);
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let (m, samples) = tiny_samples(4);
        let cfg = TrainConfig {
            steps: 20,
            lr: 0.05,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (a, ca) = train_toy(&m, &samples, &cfg).unwrap();
        let (b, cb) = train_toy(&m, &samples, &cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
        let before = evaluate(&m, &samples, 1.0).unwrap().combined;
        let after = evaluate(&a, &samples, 1.0).unwrap().combined;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn curve_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let curve = [LossPoint {
            step: 0,
            ce: 1.5,
            img: 0.25,
            combined: 1.75,
        }];
        write_loss_curve(&curve, &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "step,ce,img,combined\n0,1.5,0.25,1.75\n"
        );
    }
}
