//! Side-by-side comparison of retention policies on one decoding workload.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::attnstats::csv_err;
use crate::cachepolicy::{bytes_estimate, CachePolicy};
use crate::engine::{
    generate, teacher_forced_divergence, DecodeMode, Divergence, GenerateOptions, GenerationTrace,
    Model, SCALAR_WIDTH,
};
use crate::seqmodel::MultimodalSequence;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Tokens generated after the prompt.
    pub total_steps: usize,
    /// Prefix lengths at which divergence is measured; empty means the full
    /// trajectory only.
    pub checkpoints: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    /// Wall-clock measurement. When off, runs may execute concurrently and
    /// `mean_per_token_seconds` is reported as 0.
    pub timing: bool,
    /// Sampling temperature of the unconstrained validity run.
    pub free_temperature: f64,
    pub max_text_run: usize,
    /// Reject workloads that never leave the smallest window.
    pub require_past_window: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            total_steps: 512,
            checkpoints: Vec::new(),
            repeats: 3,
            seed: 0,
            timing: true,
            free_temperature: 1.0,
            max_text_run: 24,
            require_past_window: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: CachePolicy,
    pub peak_entries: usize,
    pub bytes_estimate: usize,
    pub mean_per_token_seconds: f64,
    pub divergence: Vec<Divergence>,
    /// Share of well-formed image blocks in unconstrained decoding.
    pub validity_rate: f64,
    pub free_blocks_started: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub total_steps: usize,
    pub prompt_len: usize,
    pub repeats: usize,
    pub seed: u64,
    pub timing: bool,
    pub policies: Vec<PolicyReport>,
}

fn run_policy(
    model: &Model,
    prompt: &MultimodalSequence,
    policy: CachePolicy,
    trajectory: &[crate::seqmodel::Token],
    checkpoints: &[usize],
    cfg: &BenchConfig,
) -> Result<PolicyReport> {
    let divergence = teacher_forced_divergence(model, trajectory, policy, checkpoints)?;
    let opts = GenerateOptions {
        steps: cfg.total_steps,
        seed: cfg.seed,
        max_text_run: cfg.max_text_run,
        ..GenerateOptions::default()
    };
    let runs = if cfg.timing { cfg.repeats } else { 1 };
    let mut first: Option<(Vec<crate::seqmodel::Token>, Vec<usize>)> = None;
    let mut seconds = 0.0;
    for _ in 0..runs {
        let g = generate(model, prompt, policy, opts)?;
        let gen_steps = &g.trace.step_seconds[g.prompt_len..];
        if !gen_steps.is_empty() {
            seconds += gen_steps.iter().sum::<f64>() / gen_steps.len() as f64;
        }
        match &first {
            None => first = Some((g.tokens, g.trace.retained)),
            Some((toks, ret)) => {
                if *toks != g.tokens || *ret != g.trace.retained {
                    return Err(Error::State(format!("{policy}: repeat produced a different run")));
                }
            }
        }
    }
    let (_, retained) = first.expect("at least one run");
    let peak_entries = retained.iter().copied().max().unwrap_or(0);
    let free = generate(
        model,
        prompt,
        policy,
        GenerateOptions {
            mode: DecodeMode::Free,
            temperature: Some(cfg.free_temperature),
            ..opts
        },
    )?;
    Ok(PolicyReport {
        policy,
        peak_entries,
        bytes_estimate: bytes_estimate(peak_entries, model.config.cache_dims(), SCALAR_WIDTH),
        mean_per_token_seconds: if cfg.timing { seconds / runs as f64 } else { 0.0 },
        divergence,
        validity_rate: free.trace.validity_rate(),
        free_blocks_started: free.trace.blocks_started,
    })
}

/// Runs every policy on the same workload. Divergence is measured on the
/// dense argmax trajectory; peak entries and timing come from each policy's
/// own constrained decoding; validity from its unconstrained decoding.
pub fn run_benchmark(
    model: &Model,
    prompt: &MultimodalSequence,
    policies: &[CachePolicy],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if policies.is_empty() {
        return Err(Error::Config("no policies to benchmark".into()));
    }
    if cfg.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if !(cfg.free_temperature > 0.0) {
        return Err(Error::Config("free_temperature must be positive".into()));
    }
    let m = model.config.seq.image_block_len;
    for p in policies {
        p.validate(m)?;
        if let Some(w) = p.window() {
            if cfg.require_past_window && prompt.len() + cfg.total_steps <= w {
                return Err(Error::Config(format!(
                    "{p}: {} tokens never exceed the window",
                    prompt.len() + cfg.total_steps
                )));
            }
        }
    }
    let total_len = prompt.len() + cfg.total_steps;
    let checkpoints = if cfg.checkpoints.is_empty() {
        vec![total_len]
    } else {
        cfg.checkpoints.clone()
    };
    let reference = generate(
        model,
        prompt,
        CachePolicy::Dense,
        GenerateOptions {
            steps: cfg.total_steps,
            seed: cfg.seed,
            max_text_run: cfg.max_text_run,
            ..GenerateOptions::default()
        },
    )?;
    let trajectory = &reference.tokens;

    let reports = if cfg.timing {
        policies
            .iter()
            .map(|&p| run_policy(model, prompt, p, trajectory, &checkpoints, cfg))
            .collect::<Result<Vec<_>>>()?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = policies
                .iter()
                .map(|&p| {
                    let checkpoints = &checkpoints;
                    s.spawn(move || run_policy(model, prompt, p, trajectory, checkpoints, cfg))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("benchmark worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };
    Ok(BenchReport {
        total_steps: cfg.total_steps,
        prompt_len: prompt.len(),
        repeats: cfg.repeats,
        seed: cfg.seed,
        timing: cfg.timing,
        policies: reports,
    })
}

pub const CSV_HEADER: [&str; 8] = [
    "policy",
    "peak_entries",
    "bytes",
    "mean_tok_s",
    "ckpt",
    "max_logit_diff",
    "kl",
    "validity",
];

impl BenchReport {
    /// One row per (policy, checkpoint).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
        for p in &self.policies {
            for d in &p.divergence {
                w.write_record([
                    p.policy.name().to_string(),
                    p.peak_entries.to_string(),
                    p.bytes_estimate.to_string(),
                    p.mean_per_token_seconds.to_string(),
                    d.t.to_string(),
                    d.max_abs_logit_diff.to_string(),
                    d.kl.to_string(),
                    p.validity_rate.to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn policy(&self, name: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy.name() == name)
    }
}

/// Least-squares fit of per-token time against position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeProfile {
    pub slope: f64,
    pub std_err: f64,
    pub intercept: f64,
    pub n: usize,
}

pub const MIN_PROFILE_STEPS: usize = 100;

/// Ordinary least squares of `ys` on `xs`, with the slope's standard error.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Result<TimeProfile> {
    let n = xs.len();
    if n != ys.len() || n < 3 {
        return Err(Error::Contract(format!(
            "need at least 3 paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("positions are all equal".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(TimeProfile {
        slope,
        std_err: (rss / (nf - 2.0) / sxx).sqrt(),
        intercept,
        n,
    })
}

/// Slope of step time against position over every step of a trace.
pub fn per_token_time_profile(trace: &GenerationTrace) -> Result<TimeProfile> {
    let n = trace.step_seconds.len();
    if n < MIN_PROFILE_STEPS {
        return Err(Error::Contract(format!(
            "time profile needs at least {MIN_PROFILE_STEPS} steps, trace has {n}"
        )));
    }
    let xs: Vec<f64> = (0..n).map(|t| t as f64).collect();
    fit_slope(&xs, &trace.step_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ModelConfig;
    use crate::seqmodel::{story_prompt, synth_stories};

    fn trace_of(ys: Vec<f64>) -> GenerationTrace {
        GenerationTrace {
            step_seconds: ys,
            ..Default::default()
        }
    }

    #[test]
    fn constant_time_has_zero_slope() {
        let p = per_token_time_profile(&trace_of(vec![2e-4; 150])).unwrap();
        assert!(p.slope.abs() < 1e-18);
        assert!(p.std_err.abs() < 1e-18);
    }

    #[test]
    fn linear_time_recovers_coefficient() {
        let c = 3e-7;
        let p = per_token_time_profile(&trace_of((0..200).map(|t| c * t as f64).collect())).unwrap();
        assert!((p.slope - c).abs() < 1e-15);
    }

    #[test]
    fn short_trace_rejected() {
        assert!(per_token_time_profile(&trace_of(vec![1.0; 99])).is_err());
    }

    fn fixture() -> (Model, MultimodalSequence) {
        let m = Model::new(ModelConfig::desk()).unwrap();
        let s = synth_stories(1, 2, 1, m.config.seq.d_feat).remove(0);
        let p = story_prompt(&s, 1, &m.config.seq).unwrap();
        (m, p)
    }

    fn policies(w: usize) -> Vec<CachePolicy> {
        vec![
            CachePolicy::Dense,
            CachePolicy::Window { window: w },
            CachePolicy::AttentionSink { n_sink: 4, window: w },
            CachePolicy::MultimodalSink {
                n_sink: 4,
                k_head: 1,
                k_tail: 2,
                window: w,
            },
        ]
    }

    #[test]
    fn within_window_run_has_no_divergence() {
        let (m, p) = fixture();
        let cfg = BenchConfig {
            total_steps: 20,
            repeats: 1,
            timing: false,
            require_past_window: false,
            checkpoints: vec![10, p.len() + 20],
            ..BenchConfig::default()
        };
        let r = run_benchmark(&m, &p, &policies(p.len() + 20), &cfg).unwrap();
        for pr in &r.policies {
            for d in &pr.divergence {
                assert!(d.max_abs_logit_diff < 1e-9 && d.kl < 1e-12);
            }
        }
        let strict = BenchConfig {
            require_past_window: true,
            ..cfg
        };
        assert!(matches!(
            run_benchmark(&m, &p, &policies(p.len() + 20), &strict),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_policy_rejected_before_running() {
        let (m, p) = fixture();
        let bad = [CachePolicy::AttentionSink { n_sink: 8, window: 8 }];
        assert!(matches!(
            run_benchmark(&m, &p, &bad, &BenchConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn memory_ordering_and_round_trip() {
        let (m, p) = fixture();
        let cfg = BenchConfig {
            total_steps: 160,
            repeats: 2,
            ..BenchConfig::default()
        };
        let r = run_benchmark(&m, &p, &policies(32), &cfg).unwrap();
        let peak = |n| r.policy(n).unwrap().peak_entries;
        assert!(peak("dense") > peak("mmsink"));
        assert!(peak("mmsink") > peak("sink"));
        assert_eq!(peak("sink"), 32);
        assert_eq!(peak("window"), 32);
        assert_eq!(r.policy("dense").unwrap().divergence[0].kl, 0.0);

        let dir = tempfile::tempdir().unwrap();
        let (csv_path, json_path) = (dir.path().join("b.csv"), dir.path().join("b.json"));
        r.write_csv(&csv_path).unwrap();
        r.write_json(&json_path).unwrap();
        assert_eq!(BenchReport::read_json(&json_path).unwrap(), r);
        let text = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(text.lines().count(), 5);
    }
}
