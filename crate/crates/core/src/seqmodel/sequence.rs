use super::Token;
use crate::{Error, Result};

/// An image block whose BoI has been seen but whose EoI has not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenBlock {
    pub boi: usize,
    /// Slot expected next; equals the block length when only EoI may follow.
    pub next_slot: usize,
}

/// What the grammar allows at the next position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    /// Nothing pushed yet: only BoS.
    Start,
    /// Text, punctuation, BoI or EoS.
    Free,
    /// The given image slot.
    Slot(usize),
    /// The closing EoI of the open block.
    Eoi,
    /// EoS has been emitted.
    Ended,
}

/// Structural effect of one token on a [`BlockHistory`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepEvent {
    pub opened: bool,
    pub completed: Option<(usize, usize)>,
    /// An open block was abandoned because the token did not continue it.
    pub aborted: bool,
    /// The token broke the grammar (only reported in lenient mode).
    pub violation: bool,
}

/// Incremental image-block bookkeeping for a token stream.
///
/// In strict mode any grammar error is returned as [`Error::Grammar`]. In
/// lenient mode errors are recorded: a token that does not continue an open
/// block abandons it and is then treated as if no block were open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockHistory {
    block_len: usize,
    len: usize,
    completed: Vec<(usize, usize)>,
    open: Option<OpenBlock>,
    ended: bool,
    started: usize,
    aborted: usize,
    violations: usize,
}

impl BlockHistory {
    pub fn new(block_len: usize) -> Self {
        BlockHistory {
            block_len,
            len: 0,
            completed: Vec::new(),
            open: None,
            ended: false,
            started: 0,
            aborted: 0,
            violations: 0,
        }
    }

    /// Rebuilds the history of an arbitrary token list in lenient mode.
    pub fn scan_lenient(tokens: &[Token], block_len: usize) -> Self {
        let mut h = BlockHistory::new(block_len);
        for &t in tokens {
            h.advance(t, false).expect("lenient advance never fails");
        }
        h
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// Number of tokens consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Completed blocks as `(boi_pos, eoi_pos)`, ascending.
    pub fn completed(&self) -> &[(usize, usize)] {
        &self.completed
    }

    pub fn open(&self) -> Option<OpenBlock> {
        self.open
    }

    pub fn blocks_started(&self) -> usize {
        self.started
    }

    pub fn blocks_aborted(&self) -> usize {
        self.aborted
    }

    pub fn violations(&self) -> usize {
        self.violations
    }

    pub fn expect(&self) -> Expect {
        if self.len == 0 {
            Expect::Start
        } else if self.ended {
            Expect::Ended
        } else {
            match self.open {
                Some(b) if b.next_slot < self.block_len => Expect::Slot(b.next_slot),
                Some(_) => Expect::Eoi,
                None => Expect::Free,
            }
        }
    }

    /// Whether `token` is legal at the next position.
    pub fn allows(&self, token: Token) -> bool {
        match (self.expect(), token) {
            (Expect::Start, Token::Bos) => true,
            (Expect::Free, Token::Text(_) | Token::Punct(_) | Token::Boi | Token::Eos) => true,
            (Expect::Slot(s), Token::Img(i)) => i as usize == s,
            (Expect::Eoi, Token::Eoi) => true,
            _ => false,
        }
    }

    pub fn advance(&mut self, token: Token, strict: bool) -> Result<StepEvent> {
        let pos = self.len;
        let mut ev = StepEvent::default();
        if !self.allows(token) {
            if strict {
                return Err(Error::Grammar {
                    pos,
                    msg: format!("{token} not allowed here (expected {:?})", self.expect()),
                });
            }
            ev.violation = true;
            self.violations += 1;
            if self.open.take().is_some() {
                ev.aborted = true;
                self.aborted += 1;
            }
        }
        // The grammar-legal transitions; in lenient mode also the fallback for
        // a token that broke an open block.
        match (self.open.as_mut(), token) {
            (Some(b), Token::Img(i)) if i as usize == b.next_slot && b.next_slot < self.block_len => {
                b.next_slot += 1;
            }
            (Some(b), Token::Eoi) if b.next_slot == self.block_len => {
                ev.completed = Some((b.boi, pos));
                self.completed.push((b.boi, pos));
                self.open = None;
            }
            (None, Token::Boi) => {
                self.open = Some(OpenBlock { boi: pos, next_slot: 0 });
                self.started += 1;
                ev.opened = true;
            }
            // EoS only terminates strict streams.
            (None, Token::Eos) if strict => self.ended = true,
            _ => {}
        }
        self.len += 1;
        Ok(ev)
    }
}

/// A structurally validated interleaved token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalSequence {
    tokens: Vec<Token>,
    history: BlockHistory,
}

impl MultimodalSequence {
    /// Validates a persisted sequence: every image block must be closed.
    pub fn new(tokens: Vec<Token>, block_len: usize) -> Result<Self> {
        let seq = Self::new_prefix(tokens, block_len)?;
        if let Some(b) = seq.history.open {
            return Err(Error::Grammar {
                pos: b.boi,
                msg: "image block is not closed".into(),
            });
        }
        Ok(seq)
    }

    /// Validates a generation prefix, which may end inside an image block.
    pub fn new_prefix(tokens: Vec<Token>, block_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Grammar {
                pos: 0,
                msg: "sequence is empty".into(),
            });
        }
        let mut history = BlockHistory::new(block_len);
        for &t in &tokens {
            if let Token::Img(s) = t {
                if s as usize >= block_len {
                    return Err(Error::Range {
                        what: "image slot",
                        value: s as i64,
                        range: format!("0..{block_len}"),
                    });
                }
            }
            history.advance(t, true)?;
        }
        Ok(MultimodalSequence { tokens, history })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(boi_pos, eoi_pos)` of every completed image block.
    pub fn image_blocks(&self) -> &[(usize, usize)] {
        self.history.completed()
    }

    pub fn open_block(&self) -> Option<OpenBlock> {
        self.history.open()
    }

    pub fn history(&self) -> &BlockHistory {
        &self.history
    }

    pub fn block_len(&self) -> usize {
        self.history.block_len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.tokens.iter().map(Token::label).collect()
    }
}
