//! Checks any file written by the other subcommands.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mmsink_core::attnstats::{read_attention_records, Category};
use mmsink_core::bench::{BenchReport, CSV_HEADER};
use mmsink_core::engine::DecodeMode;
use mmsink_core::seqmodel::{read_stories, BlockHistory, Story};
use mmsink_core::{Model, MultimodalSequence, Token};
use serde_json::Value;

use crate::commands::GenRecord;
use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Stories,
    Model,
    Generation,
    Attention,
    BenchJson,
    BenchCsv,
    LossCurve,
    Occurrence,
    Categories,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Stories => "stories",
            Kind::Model => "model",
            Kind::Generation => "generation",
            Kind::Attention => "attention",
            Kind::BenchJson => "bench-json",
            Kind::BenchCsv => "bench-csv",
            Kind::LossCurve => "loss-curve",
            Kind::Occurrence => "occurrence",
            Kind::Categories => "categories",
        }
    }
}

fn first_line(path: &Path) -> Result<String> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            return Ok(line);
        }
    }
    bail!("{} is empty", path.display())
}

pub fn detect(path: &Path) -> Result<Kind> {
    if path.is_dir() {
        return Ok(Kind::Attention);
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "toml" => Ok(Kind::Config),
        "csv" => {
            let header = first_line(path)?;
            Ok(match header.trim_end() {
                h if h == CSV_HEADER.join(",") => Kind::BenchCsv,
                "step,ce,img,combined" => Kind::LossCurve,
                "label,count" => Kind::Occurrence,
                "category,topk_count,topk_share,base_count,base_share" => Kind::Categories,
                other => bail!("unrecognised CSV header {other:?}"),
            })
        }
        "json" | "jsonl" => {
            let text = if ext == "json" {
                fs::read_to_string(path)?
            } else {
                first_line(path)?
            };
            let v: Value = serde_json::from_str(&text).context("not JSON")?;
            let has = |k: &str| v.get(k).is_some();
            Ok(if has("tensors") {
                Kind::Model
            } else if has("policies") {
                Kind::BenchJson
            } else if has("story_id") {
                Kind::Stories
            } else if has("tokens") {
                Kind::Generation
            } else if has("row") || has("rows") {
                Kind::Attention
            } else {
                bail!("unrecognised JSON content")
            })
        }
        other => bail!("unrecognised file extension {other:?}"),
    }
}

pub fn validate_file(path: &Path) -> Result<Kind> {
    let kind = detect(path)?;
    match kind {
        Kind::Config => {
            RunConfig::from_toml(&fs::read_to_string(path)?)?;
        }
        Kind::Stories => {
            let first: Story = serde_json::from_str(&first_line(path)?)?;
            let d = first.items.first().map_or(0, |i| i.image_feature.len());
            read_stories(path, d)?;
        }
        Kind::Model => {
            Model::load(path)?;
        }
        Kind::Generation => validate_generation(path)?,
        Kind::Attention => {
            let recs = read_attention_records(path)?;
            ensure!(!recs.is_empty(), "no attention records");
        }
        Kind::BenchJson => validate_bench_json(path)?,
        Kind::BenchCsv => validate_bench_csv(path)?,
        Kind::LossCurve => {
            for (i, row) in csv_rows(path, 4)?.iter().enumerate() {
                ensure!(row[0].parse::<usize>()? == i, "row {}: steps out of order", i + 1);
                for f in &row[1..] {
                    ensure!(f.parse::<f64>()?.is_finite(), "row {}: non-finite loss", i + 1);
                }
            }
        }
        Kind::Occurrence => {
            for row in csv_rows(path, 2)? {
                ensure!(!row[0].is_empty(), "empty label");
                row[1].parse::<usize>()?;
            }
        }
        Kind::Categories => {
            let rows = csv_rows(path, 5)?;
            ensure!(rows.len() == Category::ALL.len(), "expected one row per category");
            for (row, c) in rows.iter().zip(Category::ALL) {
                ensure!(row[0] == c.name(), "unexpected category {:?}", row[0]);
                for share in [&row[2], &row[4]] {
                    let s: f64 = share.parse()?;
                    ensure!((0.0..=1.0).contains(&s), "share {s} outside [0, 1]");
                }
            }
        }
    }
    Ok(kind)
}

fn csv_rows(path: &Path, width: usize) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        ensure!(rec.len() == width, "row {}: {} fields, expected {width}", i + 1, rec.len());
        out.push(rec.iter().map(String::from).collect());
    }
    Ok(out)
}

fn validate_generation(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let at = || format!("line {}", i + 1);
        let rec: GenRecord = serde_json::from_str(line).with_context(at)?;
        let tokens = rec
            .tokens
            .iter()
            .map(|l| Token::from_label(l).with_context(|| format!("unknown token label {l:?}")))
            .collect::<Result<Vec<_>>>()
            .with_context(at)?;
        let m = rec.image_block_len;
        rec.policy.validate(m).with_context(at)?;
        ensure!(rec.prompt_len <= tokens.len(), "{}: prompt longer than output", at());
        ensure!(rec.retained.len() == tokens.len(), "{}: one retained count per token expected", at());
        for (t, &r) in rec.retained.iter().enumerate() {
            ensure!(r >= 1 && r <= t + 1, "{}: {r} entries retained at step {t}", at());
        }
        let hist = BlockHistory::scan_lenient(&tokens, m);
        ensure!(
            hist.completed().len() == rec.blocks_completed
                && hist.blocks_aborted() == rec.blocks_aborted
                && hist.blocks_started() == rec.blocks_started,
            "{}: block counts disagree with the tokens",
            at()
        );
        if rec.mode == DecodeMode::Constrained {
            MultimodalSequence::new_prefix(tokens.clone(), m).with_context(at)?;
        }
        for f in &rec.image_features {
            ensure!(tokens.get(f.boi) == Some(&Token::Boi), "{}: features not at a BoI", at());
            ensure!(
                f.rows.iter().flatten().all(|x| x.is_finite()),
                "{}: non-finite feature",
                at()
            );
        }
    }
    Ok(())
}

fn validate_bench_json(path: &Path) -> Result<()> {
    let r = BenchReport::read_json(path)?;
    ensure!(!r.policies.is_empty(), "no policies");
    for p in &r.policies {
        ensure!((0.0..=1.0).contains(&p.validity_rate), "{}: validity outside [0, 1]", p.policy);
        ensure!(p.mean_per_token_seconds >= 0.0, "{}: negative time", p.policy);
        for d in &p.divergence {
            ensure!(
                d.kl >= 0.0 && d.max_abs_logit_diff >= 0.0,
                "{}: negative divergence",
                p.policy
            );
        }
    }
    Ok(())
}

fn validate_bench_csv(path: &Path) -> Result<()> {
    let rows = csv_rows(path, CSV_HEADER.len())?;
    ensure!(!rows.is_empty(), "no rows");
    for (i, row) in rows.iter().enumerate() {
        let at = || format!("row {}", i + 1);
        ensure!(
            ["dense", "window", "sink", "mmsink"].contains(&row[0].as_str()),
            "{}: unknown policy {:?}",
            at(),
            row[0]
        );
        for f in &row[1..3] {
            f.parse::<usize>().with_context(at)?;
        }
        row[4].parse::<usize>().with_context(at)?;
        for f in [&row[3], &row[5], &row[6], &row[7]] {
            let v: f64 = f.parse().with_context(at)?;
            ensure!(v >= 0.0 && v.is_finite(), "{}: bad value {v}", at());
        }
    }
    Ok(())
}
