use serde::{Deserialize, Serialize};
use std::fmt;

use crate::{Error, Result};

/// Punctuation characters that are split off words into [`Token::Punct`].
pub const PUNCTUATION: [char; 5] = [',', '.', ';', '!', '?'];

const SPECIALS: usize = 4;

/// The unit of every sequence and cache entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Bos,
    Eos,
    /// Hash bucket of a whitespace-delimited word.
    Text(u32),
    /// Index into [`PUNCTUATION`].
    Punct(u8),
    Boi,
    /// Slot index inside an image block.
    Img(u16),
    Eoi,
}

impl Token {
    /// Label used in attention dumps and generated-sequence files.
    pub fn label(&self) -> String {
        match *self {
            Token::Bos => "BOS".into(),
            Token::Eos => "EOS".into(),
            Token::Boi => "BOI".into(),
            Token::Eoi => "EOI".into(),
            Token::Img(slot) => format!("IMG{slot:02}"),
            Token::Punct(p) => PUNCTUATION
                .get(p as usize)
                .map(|c| c.to_string())
                .unwrap_or_else(|| format!("P{p}")),
            Token::Text(id) => format!("w{id}"),
        }
    }

    /// Inverse of [`Token::label`].
    pub fn from_label(label: &str) -> Option<Token> {
        match label {
            "BOS" => return Some(Token::Bos),
            "EOS" => return Some(Token::Eos),
            "BOI" => return Some(Token::Boi),
            "EOI" => return Some(Token::Eoi),
            _ => {}
        }
        let mut chars = label.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if let Some(p) = PUNCTUATION.iter().position(|&q| q == c) {
                return Some(Token::Punct(p as u8));
            }
        }
        if let Some(slot) = label.strip_prefix("IMG") {
            return slot.parse().ok().map(Token::Img);
        }
        if let Some(id) = label.strip_prefix('w') {
            return id.parse().ok().map(Token::Text);
        }
        None
    }

    pub fn is_punct(&self) -> bool {
        matches!(self, Token::Punct(_))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Sizes shared by sequences, the vocabulary and the image targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqConfig {
    /// Number of image-slot tokens between BoI and EoI.
    pub image_block_len: usize,
    /// Number of hash buckets for words.
    pub text_vocab: u32,
    /// Dimension of per-image target features.
    pub d_feat: usize,
}

impl SeqConfig {
    pub const fn desk() -> Self {
        SeqConfig {
            image_block_len: 8,
            text_vocab: 256,
            d_feat: 16,
        }
    }

    pub const fn paper_faithful() -> Self {
        SeqConfig {
            image_block_len: 64,
            text_vocab: 256,
            d_feat: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_block_len == 0 || self.image_block_len > u16::MAX as usize {
            return Err(Error::Config(format!(
                "image_block_len must be in 1..={}, got {}",
                u16::MAX,
                self.image_block_len
            )));
        }
        if self.text_vocab == 0 {
            return Err(Error::Config("text_vocab must be positive".into()));
        }
        if self.d_feat == 0 {
            return Err(Error::Config("d_feat must be positive".into()));
        }
        Ok(())
    }

    /// Specials, image slots, punctuation and word buckets.
    pub fn vocab_size(&self) -> usize {
        SPECIALS + self.image_block_len + PUNCTUATION.len() + self.text_vocab as usize
    }

    /// Dense vocabulary index. Layout: BOS, EOS, BOI, EOI, image slots,
    /// punctuation, word buckets.
    pub fn token_id(&self, token: Token) -> usize {
        let m = self.image_block_len;
        match token {
            Token::Bos => 0,
            Token::Eos => 1,
            Token::Boi => 2,
            Token::Eoi => 3,
            Token::Img(s) => SPECIALS + s as usize,
            Token::Punct(p) => SPECIALS + m + p as usize,
            Token::Text(w) => SPECIALS + m + PUNCTUATION.len() + w as usize,
        }
    }

    pub fn token_from_id(&self, id: usize) -> Option<Token> {
        let m = self.image_block_len;
        let p = PUNCTUATION.len();
        Some(match id {
            0 => Token::Bos,
            1 => Token::Eos,
            2 => Token::Boi,
            3 => Token::Eoi,
            i if i < SPECIALS + m => Token::Img((i - SPECIALS) as u16),
            i if i < SPECIALS + m + p => Token::Punct((i - SPECIALS - m) as u8),
            i if i < self.vocab_size() => Token::Text((i - SPECIALS - m - p) as u32),
            _ => return None,
        })
    }

    /// Checks the index ranges carried by a token.
    pub fn check_token(&self, token: Token) -> Result<()> {
        match token {
            Token::Img(s) if s as usize >= self.image_block_len => Err(Error::Range {
                what: "image slot",
                value: s as i64,
                range: format!("0..{}", self.image_block_len),
            }),
            Token::Text(w) if w >= self.text_vocab => Err(Error::Range {
                what: "word bucket",
                value: w as i64,
                range: format!("0..{}", self.text_vocab),
            }),
            Token::Punct(p) if p as usize >= PUNCTUATION.len() => Err(Error::Range {
                what: "punctuation index",
                value: p as i64,
                range: format!("0..{}", PUNCTUATION.len()),
            }),
            _ => Ok(()),
        }
    }
}

impl Default for SeqConfig {
    fn default() -> Self {
        SeqConfig::desk()
    }
}

/// 64-bit FNV-1a of the word's UTF-8 bytes, reduced modulo `text_vocab`.
pub fn word_bucket(word: &str, text_vocab: u32) -> u32 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let hash = word
        .bytes()
        .fold(OFFSET, |h, b| (h ^ b as u64).wrapping_mul(PRIME));
    (hash % text_vocab as u64) as u32
}

/// Splits on whitespace, separates the characters in [`PUNCTUATION`] and
/// hashes the remaining runs into word buckets.
pub fn tokenize_text(text: &str, text_vocab: u32) -> Vec<Token> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word_start = None;
        for (i, c) in chunk.char_indices() {
            match PUNCTUATION.iter().position(|&p| p == c) {
                Some(p) => {
                    if let Some(s) = word_start.take() {
                        out.push(Token::Text(word_bucket(&chunk[s..i], text_vocab)));
                    }
                    out.push(Token::Punct(p as u8));
                }
                None => {
                    word_start.get_or_insert(i);
                }
            }
        }
        if let Some(s) = word_start {
            out.push(Token::Text(word_bucket(&chunk[s..], text_vocab)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(tokenize_text("", 256).is_empty());
        assert!(tokenize_text("   \n\t", 256).is_empty());
    }

    #[test]
    fn fnv_buckets_are_frozen() {
        // FNV-1a 64 reference values: "hello" = 0xa430d84680aabd0b,
        // "world" = 0x4f59ff5e730c8af3.
        assert_eq!(word_bucket("hello", 256), 0x0b);
        assert_eq!(word_bucket("world", 256), 0xf3);
        assert_eq!(word_bucket("", 256), (0xcbf2_9ce4_8422_2325u64 % 256) as u32);
    }

    #[test]
    fn hello_world_golden() {
        let toks = tokenize_text("hello, world.", 256);
        assert_eq!(
            toks,
            vec![
                Token::Text(11),
                Token::Punct(0),
                Token::Text(243),
                Token::Punct(1)
            ]
        );
    }

    #[test]
    fn repeated_word_same_bucket() {
        let toks = tokenize_text("a a", 256);
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0], toks[1]);
    }

    #[test]
    fn punctuation_inside_word() {
        let toks = tokenize_text("a;b!?", 64);
        assert_eq!(toks.len(), 5);
        assert_eq!(toks[1], Token::Punct(2));
        assert_eq!(toks[3], Token::Punct(3));
        assert_eq!(toks[4], Token::Punct(4));
    }

    #[test]
    fn vocab_ids_round_trip() {
        let cfg = SeqConfig::desk();
        for id in 0..cfg.vocab_size() {
            let tok = cfg.token_from_id(id).unwrap();
            assert_eq!(cfg.token_id(tok), id);
            cfg.check_token(tok).unwrap();
        }
        assert_eq!(cfg.token_from_id(cfg.vocab_size()), None);
        assert_eq!(cfg.vocab_size(), 4 + 8 + 5 + 256);
    }

    #[test]
    fn labels_round_trip() {
        let cfg = SeqConfig::paper_faithful();
        for id in 0..cfg.vocab_size() {
            let tok = cfg.token_from_id(id).unwrap();
            assert_eq!(Token::from_label(&tok.label()), Some(tok));
        }
        assert_eq!(Token::Img(57).label(), "IMG57");
        assert_eq!(Token::Img(4).label(), "IMG04");
        assert_eq!(Token::from_label("the"), None);
    }

    #[test]
    fn out_of_range_tokens_rejected() {
        let cfg = SeqConfig::desk();
        assert!(cfg.check_token(Token::Img(8)).is_err());
        assert!(cfg.check_token(Token::Text(256)).is_err());
        assert!(cfg.check_token(Token::Punct(5)).is_err());
    }
}
