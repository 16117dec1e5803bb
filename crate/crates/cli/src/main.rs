//! `mmsink`: synthesis, toy training, generation, attention statistics and
//! benchmarking of KV-cache retention policies.

mod commands;
mod config;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, Profile};

#[derive(Parser)]
#[command(name = "mmsink", version, about, propagate_version = true)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Size preset used for defaults.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Seed for every random choice (falls back to MMSINK_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic stories as JSON lines.
    Synth(SynthArgs),
    /// Train the toy model on a stories file.
    TrainToy(TrainArgs),
    /// Decode from a prompt under one retention policy.
    Gen(GenArgs),
    /// Top-k attention occurrence statistics from attention dumps.
    Stats(StatsArgs),
    /// Compare retention policies on one workload.
    Bench(BenchArgs),
    /// Check files written by the other subcommands.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct PolicyArgs {
    /// dense, window, sink or mmsink.
    #[arg(long)]
    policy: Option<String>,
    /// Cache window; 0 uses the model's training length.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    n_sink: Option<usize>,
    /// Image slots kept after each BoI.
    #[arg(long)]
    k_head: Option<usize>,
    /// Image slots kept before each EoI.
    #[arg(long)]
    k_tail: Option<usize>,
}

impl PolicyArgs {
    fn apply(self, o: &mut Overrides) {
        o.set("policy", "policy", self.policy)
            .set("policy", "window", self.window)
            .set("policy", "n_sink", self.n_sink)
            .set("policy", "k_head", self.k_head)
            .set("policy", "k_tail", self.k_tail);
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Number of stories.
    #[arg(long)]
    stories: Option<usize>,
    /// Items per story.
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Stories file (JSON lines).
    #[arg(long)]
    stories: Option<PathBuf>,
    /// Where to write the trained model.
    #[arg(long, visible_alias = "out")]
    model_out: Option<PathBuf>,
    /// Optional loss-curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Start from this model instead of a fresh one.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Most items per training sequence.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    samples_per_story: Option<usize>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    /// Model file; omitted for a freshly initialised model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Stories file to take the prompt from; omitted to synthesise one.
    #[arg(long)]
    prompt: Option<PathBuf>,
    #[arg(long)]
    story: Option<usize>,
    #[arg(long)]
    prompt_items: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// constrained or free.
    #[arg(long)]
    mode: Option<String>,
    /// Sampling temperature; 0 decodes by argmax.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_text_run: Option<usize>,
    /// Skip image-feature prediction.
    #[arg(long)]
    no_features: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-step attention rows to this JSON-lines file.
    #[arg(long)]
    dump_attn: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    /// Attention dump file or directory of `*.jsonl` dumps.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Occurrence CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional category-share CSV.
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Image slots per block, for categorising labels.
    #[arg(long)]
    image_block_len: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<PathBuf>,
    #[arg(long)]
    story: Option<usize>,
    #[arg(long)]
    prompt_items: Option<usize>,
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated prefix lengths for divergence.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Skip wall-clock measurement; output becomes reproducible byte for byte.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    free_temperature: Option<f64>,
    #[arg(long)]
    max_text_run: Option<usize>,
    /// CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON report; defaults to the CSV path with a `.json` extension.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Files or attention-dump directories.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut o = Overrides::default();
    o.top("profile", cli.profile).top("seed", cli.seed);
    let file = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => {
            o.set("synth", "stories", a.stories)
                .set("synth", "len", a.len)
                .set("synth", "out", a.out);
            commands::synth(config::load(file, o)?)?;
        }
        Command::TrainToy(a) => {
            o.set("train", "stories", a.stories)
                .set("train", "model_out", a.model_out)
                .set("train", "curve", a.curve)
                .set("train", "steps", a.steps)
                .set("train", "lr", a.lr)
                .set("train", "lambda", a.lambda)
                .set("train", "batch_size", a.batch_size)
                .set("train", "max_len", a.max_len)
                .set("train", "samples_per_story", a.samples_per_story);
            commands::train(config::load(file, o)?, a.init)?;
        }
        Command::Gen(a) => {
            a.policy.apply(&mut o);
            o.set("gen", "model", a.model)
                .set("gen", "prompt", a.prompt)
                .set("gen", "story", a.story)
                .set("gen", "prompt_items", a.prompt_items)
                .set("gen", "steps", a.steps)
                .set("gen", "mode", a.mode)
                .set("gen", "temperature", a.temperature)
                .set("gen", "max_text_run", a.max_text_run)
                .set("gen", "features", a.no_features.then_some(false))
                .set("gen", "out", a.out)
                .set("gen", "dump_attn", a.dump_attn);
            commands::gen(config::load(file, o)?)?;
        }
        Command::Stats(a) => {
            a.policy.apply(&mut o);
            o.set("stats", "input", a.input)
                .set("stats", "k", a.k)
                .set("stats", "out", a.out)
                .set("stats", "categories", a.categories)
                .set("model", "image_block_len", a.image_block_len);
            commands::stats(config::load(file, o)?)?;
        }
        Command::Bench(a) => {
            a.policy.apply(&mut o);
            o.set("bench", "model", a.model)
                .set("bench", "prompt", a.prompt)
                .set("bench", "story", a.story)
                .set("bench", "prompt_items", a.prompt_items)
                .set("bench", "policies", a.policies)
                .set("bench", "steps", a.steps)
                .set("bench", "checkpoints", a.checkpoints)
                .set("bench", "repeats", a.repeats)
                .set("bench", "timing", a.no_timing.then_some(false))
                .set("bench", "free_temperature", a.free_temperature)
                .set("bench", "max_text_run", a.max_text_run)
                .set("bench", "report", a.report)
                .set("bench", "json", a.json);
            commands::bench(config::load(file, o)?)?;
        }
        Command::Validate(a) => {
            let mut failed = false;
            for f in &a.files {
                match validate::validate_file(f) {
                    Ok(kind) => println!("ok       {:<11} {}", kind.name(), f.display()),
                    Err(e) => {
                        failed = true;
                        println!("invalid  {}", f.display());
                        eprintln!("error: {}: {e:#}", f.display());
                    }
                }
            }
            if failed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}
