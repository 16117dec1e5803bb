use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tokenize_text, MultimodalSequence, SeqConfig, Story, Token};
use crate::{Error, Result};

/// Literal opening the instruction template.
pub const START_MARKER: &str = "start of the story.";
/// Literal that precedes the story items.
pub const PROMPT_MARKER: &str = "User prompt:";

/// An assembled sequence plus the positions that carry loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub sequence: MultimodalSequence,
    /// True on the tokens of the final story item and on the closing EoS.
    pub loss_mask: Vec<bool>,
    /// One target per image block that falls under the loss mask.
    pub target_features: Vec<Vec<f64>>,
}

impl TrainingSample {
    /// `(boi_pos, eoi_pos)` of the image blocks whose features are targets.
    pub fn target_blocks(&self) -> Vec<(usize, usize)> {
        self.sequence
            .image_blocks()
            .iter()
            .copied()
            .filter(|&(b, _)| self.loss_mask[b])
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

fn push_item(tokens: &mut Vec<Token>, text: &str, cfg: &SeqConfig) {
    tokens.extend(tokenize_text(text, cfg.text_vocab));
    tokens.push(Token::Boi);
    tokens.extend((0..cfg.image_block_len as u16).map(Token::Img));
    tokens.push(Token::Eoi);
}

fn header(cfg: &SeqConfig) -> Vec<Token> {
    let mut tokens = vec![Token::Bos];
    tokens.extend(tokenize_text(START_MARKER, cfg.text_vocab));
    tokens.extend(tokenize_text(PROMPT_MARKER, cfg.text_vocab));
    tokens
}

/// `BoS, markers, item_1 .. item_n, EoS` with loss on item `n` and EoS.
pub fn assemble_training_sequence(
    story: &Story,
    sampled_len: usize,
    cfg: &SeqConfig,
) -> Result<TrainingSample> {
    if sampled_len == 0 || sampled_len > story.items.len() {
        return Err(Error::Range {
            what: "sampled_len",
            value: sampled_len as i64,
            range: format!("1..={}", story.items.len()),
        });
    }
    story.validate(cfg.d_feat)?;
    let mut tokens = header(cfg);
    for item in &story.items[..sampled_len - 1] {
        push_item(&mut tokens, &item.text, cfg);
    }
    let target_start = tokens.len();
    let target = &story.items[sampled_len - 1];
    push_item(&mut tokens, &target.text, cfg);
    tokens.push(Token::Eos);

    let loss_mask = (0..tokens.len()).map(|i| i >= target_start).collect();
    let sequence = MultimodalSequence::new(tokens, cfg.image_block_len)?;
    Ok(TrainingSample {
        sequence,
        loss_mask,
        target_features: vec![target.image_feature.clone()],
    })
}

/// Draws `sampled_len` uniformly from `1..=max_len.min(items)` and assembles.
pub fn sample_training_sequence(
    story: &Story,
    max_len: usize,
    seed: u64,
    cfg: &SeqConfig,
) -> Result<TrainingSample> {
    let upper = max_len.min(story.items.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assemble_training_sequence(story, rng.random_range(1..=upper), cfg)
}

/// Generation prompt: the training header followed by the first `items` items.
pub fn story_prompt(story: &Story, items: usize, cfg: &SeqConfig) -> Result<MultimodalSequence> {
    if items > story.items.len() {
        return Err(Error::Range {
            what: "prompt items",
            value: items as i64,
            range: format!("0..={}", story.items.len()),
        });
    }
    let mut tokens = header(cfg);
    for item in &story.items[..items] {
        push_item(&mut tokens, &item.text, cfg);
    }
    MultimodalSequence::new(tokens, cfg.image_block_len)
}
