use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use super::{softmax_in_place, Model, StepOutput};
use crate::cachepolicy::{CachePolicy, KvCache};
use crate::seqmodel::{Expect, MultimodalSequence, Token};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// A grammar mask forces well-formed image blocks, excludes BoS/EoS and
    /// forces a BoI after `max_text_run` consecutive text tokens.
    Constrained,
    /// Unmasked decoding; grammar violations are recorded, not repaired.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub steps: usize,
    pub mode: DecodeMode,
    /// `None` decodes by argmax.
    pub temperature: Option<f64>,
    pub seed: u64,
    pub max_text_run: usize,
    pub record_attention: bool,
    pub predict_features: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            steps: 0,
            mode: DecodeMode::Constrained,
            temperature: None,
            seed: 0,
            max_text_run: 24,
            record_attention: false,
            predict_features: false,
        }
    }
}

/// One attention row, as written to attention-dump files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionDump {
    pub t: usize,
    pub layer: usize,
    pub head: usize,
    pub labels: Vec<String>,
    pub row: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationTrace {
    /// Resident entries after each forward step (prompt steps included).
    pub retained: Vec<usize>,
    /// Wall-clock seconds of each forward step.
    pub step_seconds: Vec<f64>,
    pub attention: Vec<AttentionDump>,
    /// `(boi_pos, Q x d_feat)` for every BoI decoded.
    pub image_features: Vec<(usize, Vec<Vec<f64>>)>,
    pub violations: usize,
    pub blocks_started: usize,
    pub blocks_completed: usize,
    pub blocks_aborted: usize,
}

impl GenerationTrace {
    pub fn peak_retained(&self) -> usize {
        self.retained.iter().copied().max().unwrap_or(0)
    }

    /// Fraction of finished image blocks that were well formed; 1 when no
    /// block finished.
    pub fn validity_rate(&self) -> f64 {
        let finished = self.blocks_completed + self.blocks_aborted;
        if finished == 0 {
            1.0
        } else {
            self.blocks_completed as f64 / finished as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<Token>,
    pub prompt_len: usize,
    pub trace: GenerationTrace,
}

impl Generation {
    /// The output as a validated prefix (always succeeds in constrained mode).
    pub fn sequence(&self, block_len: usize) -> Result<MultimodalSequence> {
        MultimodalSequence::new_prefix(self.tokens.clone(), block_len)
    }
}

struct Decoder<'a> {
    model: &'a Model,
    cache: KvCache,
    opts: GenerateOptions,
    trace: GenerationTrace,
    text_run: usize,
}

impl Decoder<'_> {
    fn step(&mut self, token: Token) -> Result<StepOutput> {
        let start = Instant::now();
        let out = self
            .model
            .forward_step(&mut self.cache, token, self.opts.record_attention)?;
        self.trace.step_seconds.push(start.elapsed().as_secs_f64());
        self.trace.retained.push(self.cache.len());
        let t = self.cache.seen() - 1;
        if self.opts.record_attention {
            let labels: Vec<String> = self.cache.tokens().iter().map(Token::label).collect();
            let heads = self.model.config.heads;
            for (i, row) in out.attention.iter().enumerate() {
                self.trace.attention.push(AttentionDump {
                    t,
                    layer: i / heads,
                    head: i % heads,
                    labels: labels.clone(),
                    row: row.clone(),
                });
            }
        }
        if token == Token::Boi && self.opts.predict_features {
            if let Ok(f) = self.model.predict_image_features(&self.cache) {
                self.trace.image_features.push((t, f));
            }
        }
        self.text_run = match token {
            Token::Text(_) | Token::Punct(_) => self.text_run + 1,
            _ => 0,
        };
        Ok(out)
    }

    fn allowed(&self, token: Token) -> bool {
        let h = self.cache.history();
        match self.opts.mode {
            DecodeMode::Free => true,
            DecodeMode::Constrained => match h.expect() {
                Expect::Free => match token {
                    Token::Boi => true,
                    Token::Text(_) | Token::Punct(_) => self.text_run < self.opts.max_text_run,
                    _ => false,
                },
                _ => h.allows(token),
            },
        }
    }

    fn choose(&self, logits: &[f64], rng: &mut ChaCha8Rng) -> Result<Token> {
        let seq = &self.model.config.seq;
        let candidates: Vec<(Token, f64)> = (0..logits.len())
            .filter_map(|id| seq.token_from_id(id).map(|t| (t, logits[id])))
            .filter(|&(t, _)| self.allowed(t))
            .collect();
        if candidates.is_empty() {
            return Err(Error::State("grammar mask excludes every token".into()));
        }
        match self.opts.temperature {
            None => {
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if c.1 > best.1 {
                        best = c;
                    }
                }
                Ok(best.0)
            }
            Some(temp) => {
                let mut probs: Vec<f64> = candidates.iter().map(|c| c.1 / temp).collect();
                softmax_in_place(&mut probs);
                let mut u: f64 = rng.random();
                for (c, p) in candidates.iter().zip(&probs) {
                    if u < *p {
                        return Ok(c.0);
                    }
                    u -= p;
                }
                Ok(candidates.last().unwrap().0)
            }
        }
    }
}

/// Autoregressive decoding of `opts.steps` tokens after `prompt`.
pub fn generate(
    model: &Model,
    prompt: &MultimodalSequence,
    policy: CachePolicy,
    opts: GenerateOptions,
) -> Result<Generation> {
    if prompt.block_len() != model.config.seq.image_block_len {
        return Err(Error::Validation(format!(
            "prompt uses image blocks of {} slots, model expects {}",
            prompt.block_len(),
            model.config.seq.image_block_len
        )));
    }
    if let Some(t) = opts.temperature {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {t}")));
        }
    }
    if opts.mode == DecodeMode::Constrained && opts.max_text_run == 0 {
        return Err(Error::Config("max_text_run must be positive".into()));
    }
    let strict = opts.mode == DecodeMode::Constrained;
    let mut dec = Decoder {
        model,
        cache: model.new_cache(policy, strict)?,
        opts,
        trace: GenerationTrace::default(),
        text_run: 0,
    };
    let mut tokens = prompt.tokens().to_vec();
    let mut logits = Vec::new();
    for &tok in prompt.tokens() {
        logits = dec.step(tok)?.logits;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.steps {
        let next = dec.choose(&logits, &mut rng)?;
        logits = dec.step(next)?.logits;
        tokens.push(next);
    }
    let h = dec.cache.history();
    dec.trace.violations = h.violations();
    dec.trace.blocks_started = h.blocks_started();
    dec.trace.blocks_completed = h.completed().len();
    dec.trace.blocks_aborted = h.blocks_aborted();
    Ok(Generation {
        tokens,
        prompt_len: prompt.len(),
        trace: dec.trace,
    })
}

/// Logit discrepancy between a policy and dense retention at one prefix
/// length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Prefix length: the logits compared are those produced at position `t - 1`.
    pub t: usize,
    pub max_abs_logit_diff: f64,
    /// `KL(dense || policy)` of the next-token distributions.
    pub kl: f64,
}

fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let mut p = p_logits.to_vec();
    let mut q = q_logits.to_vec();
    softmax_in_place(&mut p);
    softmax_in_place(&mut q);
    let kl: f64 = p
        .iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(f64::MIN_POSITIVE)).ln())
        .sum();
    kl.max(0.0)
}

/// Replays `trajectory` under dense retention and under `policy` and
/// compares the logits at every checkpoint.
pub fn teacher_forced_divergence(
    model: &Model,
    trajectory: &[Token],
    policy: CachePolicy,
    checkpoints: &[usize],
) -> Result<Vec<Divergence>> {
    if let Some(&bad) = checkpoints.iter().find(|&&c| c == 0 || c > trajectory.len()) {
        return Err(Error::Contract(format!(
            "checkpoint {bad} outside 1..={}",
            trajectory.len()
        )));
    }
    let mut dense = model.new_cache(CachePolicy::Dense, false)?;
    let mut pruned = model.new_cache(policy, false)?;
    let last = checkpoints.iter().copied().max().unwrap_or(0);
    let mut dense_logits = Vec::with_capacity(last);
    let mut pruned_logits = Vec::with_capacity(last);
    for &tok in &trajectory[..last] {
        dense_logits.push(model.forward_step(&mut dense, tok, false)?.logits);
        pruned_logits.push(model.forward_step(&mut pruned, tok, false)?.logits);
    }
    Ok(checkpoints
        .iter()
        .map(|&t| {
            let (a, b) = (&dense_logits[t - 1], &pruned_logits[t - 1]);
            Divergence {
                t,
                max_abs_logit_diff: a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max),
                kl: kl_divergence(a, b),
            }
        })
        .collect())
}

/// Decodes a dense argmax trajectory from `prompt` up to the largest
/// checkpoint and measures how far `policy` drifts from it.
pub fn dense_oracle_divergence(
    model: &Model,
    prompt: &MultimodalSequence,
    policy: CachePolicy,
    checkpoints: &[usize],
) -> Result<Vec<Divergence>> {
    let total = checkpoints.iter().copied().max().unwrap_or(0);
    let steps = total.saturating_sub(prompt.len());
    let reference = generate(
        model,
        prompt,
        CachePolicy::Dense,
        GenerateOptions {
            steps,
            ..GenerateOptions::default()
        },
    )?;
    teacher_forced_divergence(model, &reference.tokens, policy, checkpoints)
}
