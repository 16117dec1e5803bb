use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryItem {
    pub text: String,
    pub image_feature: Vec<f64>,
}

/// A story: an ordered list of sentences, each paired with an image feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Story {
    pub story_id: String,
    pub items: Vec<StoryItem>,
}

impl Story {
    pub fn validate(&self, d_feat: usize) -> Result<()> {
        if d_feat == 0 {
            return Err(Error::Validation("d_feat must be positive".into()));
        }
        if self.items.is_empty() {
            return Err(Error::Validation(format!(
                "story {:?} has no items",
                self.story_id
            )));
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.image_feature.len() != d_feat {
                return Err(Error::Validation(format!(
                    "story {:?} item {i}: image_feature has length {}, expected {d_feat}",
                    self.story_id,
                    item.image_feature.len()
                )));
            }
            if let Some(j) = item.image_feature.iter().position(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "story {:?} item {i}: image_feature[{j}] is not finite",
                    self.story_id
                )));
            }
        }
        Ok(())
    }
}

/// Reads a JSON-lines story file and validates every story against `d_feat`.
pub fn read_stories(path: impl AsRef<Path>, d_feat: usize) -> Result<Vec<Story>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut stories = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let story: Story = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        story.validate(d_feat).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        stories.push(story);
    }
    Ok(stories)
}

pub fn write_stories(stories: &[Story], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in stories {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const SUBJECTS: [&str; 6] = [
    "the fox",
    "a small girl",
    "the old man",
    "the robot",
    "my cat",
    "the captain",
];
const VERBS: [&str; 5] = ["walks to", "looks at", "finds", "jumps over", "dreams of"];
const PLACES: [&str; 6] = [
    "the river",
    "a castle",
    "the forest",
    "a red kite",
    "the moon",
    "the market",
];

/// Seed of the per-place feature prototypes; fixed so that every synthetic
/// corpus shares the same text-to-image relationship.
const PROTOTYPE_SEED: u64 = 0x005e_ed0f_da7a;

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    normalize(v)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Deterministic synthetic stories from a small template grammar.
///
/// Each sentence mentions a place; the paired image feature is that place's
/// fixed prototype direction plus seeded noise, normalised to unit length.
pub fn synth_stories(count: usize, items_per_story: usize, seed: u64, d_feat: usize) -> Vec<Story> {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED);
    let prototypes: Vec<Vec<f64>> = PLACES
        .iter()
        .map(|_| unit_gaussian(&mut proto_rng, d_feat))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|s| {
            let hero = *SUBJECTS.choose(&mut rng).unwrap();
            let items = (0..items_per_story)
                .map(|i| {
                    let subject = if rng.random_bool(0.7) {
                        hero
                    } else {
                        SUBJECTS.choose(&mut rng).unwrap()
                    };
                    let verb = VERBS.choose(&mut rng).unwrap();
                    let place_idx = rng.random_range(0..PLACES.len());
                    let place = PLACES[place_idx];
                    let text = match (i, rng.random_range(0..3)) {
                        (0, _) => format!("once, {subject} {verb} {place}."),
                        (_, 0) => format!("{subject} {verb} {place}."),
                        (_, 1) => format!("then {subject} {verb} {place}, and smiles."),
                        _ => format!("{subject} {verb} {place}!"),
                    };
                    let noise = unit_gaussian(&mut rng, d_feat);
                    let feature = prototypes[place_idx]
                        .iter()
                        .zip(&noise)
                        .map(|(p, n)| p + 0.3 * n)
                        .collect();
                    StoryItem {
                        text,
                        image_feature: normalize(feature),
                    }
                })
                .collect();
            Story {
                story_id: format!("synth-{seed}-{s:04}"),
                items,
            }
        })
        .collect()
}
