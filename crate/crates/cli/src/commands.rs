use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mmsink_core::attnstats::{
    aggregate_occurrence, category_shares, read_attention_records, write_category_csv,
    write_occurrence_csv,
};
use mmsink_core::bench::{run_benchmark, BenchConfig};
use mmsink_core::engine::{generate, DecodeMode, GenerateOptions};
use mmsink_core::losses::{train_toy, write_loss_curve, TrainConfig};
use mmsink_core::seqmodel::{
    read_stories, sample_training_sequence, story_prompt, synth_stories, write_stories,
};
use mmsink_core::{CachePolicy, Model, MultimodalSequence, TrainingSample};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Window used when neither the config nor the model fixes one.
pub const FALLBACK_WINDOW: usize = 64;

/// One line of a `gen` output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenRecord {
    pub policy: CachePolicy,
    pub mode: DecodeMode,
    pub seed: u64,
    pub image_block_len: usize,
    pub prompt_len: usize,
    pub tokens: Vec<String>,
    /// Resident cache entries after each step.
    pub retained: Vec<usize>,
    pub blocks_started: usize,
    pub blocks_completed: usize,
    pub blocks_aborted: usize,
    pub violations: usize,
    pub image_features: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub boi: usize,
    pub rows: Vec<Vec<f64>>,
}

fn is_set(p: &Path) -> bool {
    !p.as_os_str().is_empty()
}

pub fn require_input(p: &Path, what: &str) -> Result<()> {
    ensure!(is_set(p), "{what}: no path given");
    ensure!(p.exists(), "{what}: {} does not exist", p.display());
    Ok(())
}

pub fn require_output(p: &Path, what: &str) -> Result<()> {
    ensure!(is_set(p), "{what}: no path given");
    if let Some(dir) = p.parent().filter(|d| is_set(d)) {
        ensure!(dir.is_dir(), "{what}: directory {} does not exist", dir.display());
    }
    Ok(())
}

/// Loads the model at `path`, or builds a fresh one from the config; the
/// config's `[model]` section is updated to what is actually used.
fn model_for(cfg: &mut RunConfig, path: &Path) -> Result<Model> {
    let model = if is_set(path) {
        Model::load(path).with_context(|| format!("loading model {}", path.display()))?
    } else {
        Model::new(cfg.model_config())?
    };
    cfg.model.adopt(&model.config);
    Ok(model)
}

fn resolve_window(cfg: &mut RunConfig, model: &Model) {
    if cfg.policy.window == 0 {
        cfg.policy.window = model.trained_len.unwrap_or(FALLBACK_WINDOW);
    }
}

fn prompt_for(
    cfg: &RunConfig,
    model: &Model,
    path: &Path,
    story: usize,
    items: usize,
) -> Result<MultimodalSequence> {
    let seq = &model.config.seq;
    let stories = if is_set(path) {
        read_stories(path, seq.d_feat)?
    } else {
        synth_stories(story + 1, items.max(1), cfg.seed, seq.d_feat)
    };
    let s = stories
        .get(story)
        .with_context(|| format!("story index {story} but only {} stories", stories.len()))?;
    Ok(story_prompt(s, items, seq)?)
}

pub fn print_config(cfg: &RunConfig, command: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "# effective config for `mmsink {command}`")?;
    write!(out, "{}", cfg.to_toml()?)?;
    writeln!(out)?;
    Ok(())
}

pub fn synth(cfg: RunConfig) -> Result<()> {
    let s = &cfg.synth;
    ensure!(s.stories > 0 && s.len > 0, "stories and len must be positive");
    require_output(&s.out, "synth.out")?;
    print_config(&cfg, "synth")?;
    let stories = synth_stories(s.stories, s.len, cfg.seed, cfg.model.d_feat);
    write_stories(&stories, &s.out)?;
    println!("wrote {} stories to {}", stories.len(), s.out.display());
    Ok(())
}

pub fn training_samples(cfg: &RunConfig, model: &Model) -> Result<Vec<TrainingSample>> {
    let t = &cfg.train;
    let seq = &model.config.seq;
    let stories = read_stories(&t.stories, seq.d_feat)?;
    ensure!(!stories.is_empty(), "{} holds no stories", t.stories.display());
    let mut samples = Vec::new();
    for (i, story) in stories.iter().enumerate() {
        for j in 0..t.samples_per_story {
            let seed = cfg.seed ^ ((i as u64) << 20 | j as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            samples.push(sample_training_sequence(story, t.max_len, seed, seq)?);
        }
    }
    Ok(samples)
}

pub fn train(mut cfg: RunConfig, init: Option<PathBuf>) -> Result<()> {
    require_input(&cfg.train.stories, "train.stories")?;
    require_output(&cfg.train.model_out, "train.model_out")?;
    if is_set(&cfg.train.curve) {
        require_output(&cfg.train.curve, "train.curve")?;
    }
    ensure!(cfg.train.samples_per_story > 0, "samples_per_story must be positive");
    let model = model_for(&mut cfg, init.as_deref().unwrap_or(Path::new("")))?;
    print_config(&cfg, "train-toy")?;
    let samples = training_samples(&cfg, &model)?;
    let t = &cfg.train;
    let tc = TrainConfig {
        steps: t.steps,
        lr: t.lr,
        lambda: t.lambda,
        batch_size: t.batch_size,
        seed: cfg.seed,
    };
    let (trained, curve) = train_toy(&model, &samples, &tc)?;
    trained.save(&t.model_out)?;
    if is_set(&t.curve) {
        write_loss_curve(&curve, &t.curve)?;
    }
    let (first, last) = (curve[0], curve[curve.len() - 1]);
    println!(
        "trained {} steps on {} samples: combined loss {:.6} -> {:.6}",
        curve.len(),
        samples.len(),
        first.combined,
        last.combined
    );
    println!("wrote {}", t.model_out.display());
    Ok(())
}

fn decode_mode(name: &str) -> Result<DecodeMode> {
    match name {
        "constrained" => Ok(DecodeMode::Constrained),
        "free" => Ok(DecodeMode::Free),
        other => bail!("unknown mode {other:?} (expected constrained or free)"),
    }
}

pub fn gen(mut cfg: RunConfig) -> Result<()> {
    require_output(&cfg.gen.out, "gen.out")?;
    if is_set(&cfg.gen.prompt) {
        require_input(&cfg.gen.prompt, "gen.prompt")?;
    }
    if is_set(&cfg.gen.dump_attn) {
        require_output(&cfg.gen.dump_attn, "gen.dump_attn")?;
    }
    let model_path = cfg.gen.model.clone();
    if is_set(&model_path) {
        require_input(&model_path, "gen.model")?;
    }
    let model = model_for(&mut cfg, &model_path)?;
    resolve_window(&mut cfg, &model);
    let g = &cfg.gen;
    let mode = decode_mode(&g.mode)?;
    let policy = cfg.policy_named(&cfg.policy.policy)?;
    policy.validate(model.config.seq.image_block_len)?;
    ensure!(g.temperature >= 0.0, "temperature must be non-negative");
    let prompt = prompt_for(&cfg, &model, &g.prompt, g.story, g.prompt_items)?;
    print_config(&cfg, "gen")?;

    let dump = is_set(&g.dump_attn);
    let opts = GenerateOptions {
        steps: g.steps,
        mode,
        temperature: (g.temperature > 0.0).then_some(g.temperature),
        seed: cfg.seed,
        max_text_run: g.max_text_run,
        record_attention: dump,
        predict_features: g.features,
    };
    let out = generate(&model, &prompt, policy, opts)?;
    let record = GenRecord {
        policy,
        mode,
        seed: cfg.seed,
        image_block_len: model.config.seq.image_block_len,
        prompt_len: out.prompt_len,
        tokens: out.tokens.iter().map(|t| t.label()).collect(),
        retained: out.trace.retained.clone(),
        blocks_started: out.trace.blocks_started,
        blocks_completed: out.trace.blocks_completed,
        blocks_aborted: out.trace.blocks_aborted,
        violations: out.trace.violations,
        image_features: out
            .trace
            .image_features
            .iter()
            .map(|(boi, rows)| FeatureRecord {
                boi: *boi,
                rows: rows.clone(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string(&record)?;
    text.push('\n');
    fs::write(&g.out, text).with_context(|| format!("writing {}", g.out.display()))?;
    if dump {
        let mut text = String::new();
        for d in &out.trace.attention {
            text.push_str(&serde_json::to_string(d)?);
            text.push('\n');
        }
        fs::write(&g.dump_attn, text)
            .with_context(|| format!("writing {}", g.dump_attn.display()))?;
    }
    println!(
        "generated {} tokens under {policy}: peak {} entries, {} blocks completed, {} aborted",
        g.steps,
        out.trace.peak_retained(),
        out.trace.blocks_completed,
        out.trace.blocks_aborted
    );
    Ok(())
}

pub fn stats(cfg: RunConfig) -> Result<()> {
    let s = &cfg.stats;
    require_input(&s.input, "stats.input")?;
    require_output(&s.out, "stats.out")?;
    if is_set(&s.categories) {
        require_output(&s.categories, "stats.categories")?;
    }
    ensure!(s.k > 0, "k must be positive");
    print_config(&cfg, "stats")?;
    let records = read_attention_records(&s.input)?;
    ensure!(!records.is_empty(), "{} holds no attention records", s.input.display());
    let table = aggregate_occurrence(&records, s.k)?;
    write_occurrence_csv(&table, &s.out)?;
    if is_set(&s.categories) {
        let p = &cfg.policy;
        let shares = category_shares(&table, &records, cfg.model.image_block_len, p.k_head, p.k_tail);
        write_category_csv(&shares, &s.categories)?;
    }
    println!("{} maps, {} distinct top-{} labels", table.maps, table.counts.len(), s.k);
    for (label, count) in table.sorted().into_iter().take(10) {
        println!("{label:>8} {count}");
    }
    Ok(())
}

pub fn json_path_for(cfg: &RunConfig) -> PathBuf {
    if is_set(&cfg.bench.json) {
        cfg.bench.json.clone()
    } else {
        cfg.bench.report.with_extension("json")
    }
}

pub fn bench(mut cfg: RunConfig) -> Result<()> {
    require_output(&cfg.bench.report, "bench.report")?;
    let json = json_path_for(&cfg);
    require_output(&json, "bench.json")?;
    if is_set(&cfg.bench.prompt) {
        require_input(&cfg.bench.prompt, "bench.prompt")?;
    }
    let model_path = cfg.bench.model.clone();
    if is_set(&model_path) {
        require_input(&model_path, "bench.model")?;
    }
    let model = model_for(&mut cfg, &model_path)?;
    resolve_window(&mut cfg, &model);
    let b = &cfg.bench;
    let policies = b
        .policies
        .iter()
        .map(|n| cfg.policy_named(n))
        .collect::<Result<Vec<_>>>()?;
    let prompt = prompt_for(&cfg, &model, &b.prompt, b.story, b.prompt_items)?;
    print_config(&cfg, "bench")?;
    let bc = BenchConfig {
        total_steps: b.steps,
        checkpoints: b.checkpoints.clone(),
        repeats: b.repeats,
        seed: cfg.seed,
        timing: b.timing,
        free_temperature: b.free_temperature,
        max_text_run: b.max_text_run,
        require_past_window: true,
    };
    let report = run_benchmark(&model, &prompt, &policies, &bc)?;
    report.write_csv(&b.report)?;
    report.write_json(&json)?;
    println!(
        "{:<8} {:>8} {:>12} {:>12} {:>14} {:>10}",
        "policy", "peak", "bytes", "tok_s", "max_logit_diff", "validity"
    );
    for p in &report.policies {
        let d = p.divergence.last().expect("at least one checkpoint");
        println!(
            "{:<8} {:>8} {:>12} {:>12.3e} {:>14.6} {:>10.3}",
            p.policy.name(),
            p.peak_entries,
            p.bytes_estimate,
            p.mean_per_token_seconds,
            d.max_abs_logit_diff,
            p.validity_rate
        );
    }
    println!("wrote {} and {}", b.report.display(), json.display());
    Ok(())
}
