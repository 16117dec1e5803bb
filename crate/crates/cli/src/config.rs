//! Run configuration: profile defaults, then the config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use mmsink_core::{CachePolicy, ModelConfig, SeqConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SEED_ENV: &str = "MMSINK_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    PaperFaithful,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub image_block_len: usize,
    pub text_vocab: u32,
    pub d_feat: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub queries: usize,
    pub max_positions: usize,
}

impl ModelSection {
    fn from_config(c: &ModelConfig) -> Self {
        ModelSection {
            image_block_len: c.seq.image_block_len,
            text_vocab: c.seq.text_vocab,
            d_feat: c.seq.d_feat,
            layers: c.layers,
            heads: c.heads,
            d_model: c.d_model,
            d_ff: c.d_ff,
            queries: c.queries,
            max_positions: c.max_positions,
        }
    }

    pub fn to_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            seq: SeqConfig {
                image_block_len: self.image_block_len,
                text_vocab: self.text_vocab,
                d_feat: self.d_feat,
            },
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            queries: self.queries,
            max_positions: self.max_positions,
            seed,
        }
    }

    /// Replaces every field with the values stored in a model file.
    pub fn adopt(&mut self, c: &ModelConfig) {
        *self = Self::from_config(c);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    /// `dense`, `window`, `sink` or `mmsink`.
    pub policy: String,
    /// 0 means the model's training length.
    pub window: usize,
    pub n_sink: usize,
    pub k_head: usize,
    pub k_tail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub stories: usize,
    pub len: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stories: PathBuf,
    pub model_out: PathBuf,
    /// Empty for none.
    pub curve: PathBuf,
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    /// Upper bound on items per training sequence.
    pub max_len: usize,
    pub samples_per_story: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    /// Empty for a freshly initialised model.
    pub model: PathBuf,
    /// Stories file for the prompt; empty to synthesise one.
    pub prompt: PathBuf,
    pub story: usize,
    pub prompt_items: usize,
    pub steps: usize,
    pub mode: String,
    /// 0 decodes by argmax.
    pub temperature: f64,
    pub max_text_run: usize,
    pub features: bool,
    pub out: PathBuf,
    /// Empty for none.
    pub dump_attn: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    pub input: PathBuf,
    pub k: usize,
    pub out: PathBuf,
    /// Empty for none.
    pub categories: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub model: PathBuf,
    pub prompt: PathBuf,
    pub story: usize,
    pub prompt_items: usize,
    pub policies: Vec<String>,
    pub steps: usize,
    /// Empty for the final length only.
    pub checkpoints: Vec<usize>,
    pub repeats: usize,
    pub timing: bool,
    pub free_temperature: f64,
    pub max_text_run: usize,
    pub report: PathBuf,
    /// Empty for `report` with a `.json` extension.
    pub json: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelSection,
    pub policy: PolicySection,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub gen: GenSection,
    pub stats: StatsSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let (model, k_head, k_tail) = match profile {
            Profile::Desk => (ModelConfig::desk(), 1, 2),
            Profile::PaperFaithful => (ModelConfig::paper_faithful(), 5, 8),
        };
        RunConfig {
            profile,
            seed: 0,
            model: ModelSection::from_config(&model),
            policy: PolicySection {
                policy: "mmsink".into(),
                window: 0,
                n_sink: 4,
                k_head,
                k_tail,
            },
            synth: SynthSection {
                stories: 32,
                len: 6,
                out: "stories.jsonl".into(),
            },
            train: TrainSection {
                stories: "stories.jsonl".into(),
                model_out: "model.json".into(),
                curve: PathBuf::new(),
                steps: 500,
                lr: 0.1,
                lambda: 1.0,
                batch_size: 8,
                max_len: 4,
                samples_per_story: 1,
            },
            gen: GenSection {
                model: PathBuf::new(),
                prompt: PathBuf::new(),
                story: 0,
                prompt_items: 2,
                steps: 256,
                mode: "constrained".into(),
                temperature: 0.0,
                max_text_run: 24,
                features: true,
                out: "gen.jsonl".into(),
                dump_attn: PathBuf::new(),
            },
            stats: StatsSection {
                input: "attn.jsonl".into(),
                k: 5,
                out: "occurrence.csv".into(),
                categories: PathBuf::new(),
            },
            bench: BenchSection {
                model: PathBuf::new(),
                prompt: PathBuf::new(),
                story: 0,
                prompt_items: 2,
                policies: ["dense", "window", "sink", "mmsink"].map(String::from).to_vec(),
                steps: 512,
                checkpoints: Vec::new(),
                repeats: 3,
                timing: true,
                free_temperature: 1.0,
                max_text_run: 24,
                report: "bench.csv".into(),
                json: PathBuf::new(),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// The model architecture described by the `[model]` section.
    pub fn model_config(&self) -> ModelConfig {
        self.model.to_config(self.seed)
    }

    /// `window` must already be resolved.
    pub fn policy_named(&self, name: &str) -> Result<CachePolicy> {
        let p = &self.policy;
        let w = p.window;
        Ok(match name {
            "dense" => CachePolicy::Dense,
            "window" => CachePolicy::Window { window: w },
            "sink" => CachePolicy::AttentionSink {
                n_sink: p.n_sink,
                window: w,
            },
            "mmsink" => CachePolicy::MultimodalSink {
                n_sink: p.n_sink,
                k_head: p.k_head,
                k_tail: p.k_tail,
                window: w,
            },
            other => bail!("unknown policy {other:?} (expected dense, window, sink or mmsink)"),
        })
    }
}

/// Overrides collected from command-line flags, as a partial config table.
#[derive(Debug, Default)]
pub struct Overrides(Table);

impl Overrides {
    pub fn top<T: Serialize>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.into(), Value::try_from(v).expect("serializable flag"));
        }
        self
    }

    pub fn set<T: Serialize>(&mut self, section: &str, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            let entry = self
                .0
                .entry(section.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            if let Value::Table(t) = entry {
                t.insert(key.into(), Value::try_from(v).expect("serializable flag"));
            }
        }
        self
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn profile_of(table: &Table) -> Result<Option<Profile>> {
    match table.get("profile") {
        None => Ok(None),
        Some(v) => Ok(Some(v.clone().try_into().context("invalid profile")?)),
    }
}

/// Profile defaults, overlaid by the file, overlaid by flags. The seed falls
/// back to `MMSINK_SEED` when neither file nor flags set it.
pub fn load(file: Option<&Path>, flags: Overrides) -> Result<RunConfig> {
    let file_table = match file {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    let flags = flags.0;
    let profile = profile_of(&flags)?
        .or(profile_of(&file_table)?)
        .unwrap_or(Profile::Desk);
    let seed_given = flags.contains_key("seed") || file_table.contains_key("seed");
    let mut table = Table::try_from(RunConfig::defaults(profile))?;
    if !seed_given {
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
            table.insert("seed".into(), Value::try_from(seed)?);
        }
    }
    merge(&mut table, file_table);
    merge(&mut table, flags);
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .context("invalid configuration")?;
    Ok(cfg)
}
