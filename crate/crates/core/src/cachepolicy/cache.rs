use std::collections::BTreeMap;

use super::{retain_positions, CachePolicy};
use crate::seqmodel::{BlockHistory, StepEvent, Token};
use crate::{Error, Result};

/// Shape of the per-token key/value payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheDims {
    pub layers: usize,
    pub heads: usize,
    pub d_head: usize,
}

impl CacheDims {
    /// Width of one layer's key (or value) vector across all heads.
    pub fn layer_width(&self) -> usize {
        self.heads * self.d_head
    }
}

/// Key/value store that evicts according to a [`CachePolicy`].
///
/// Every layer and head holds the same positions, so entries are stored as
/// one position list with a flat `len * d_head` buffer per (layer, head).
#[derive(Debug, Clone)]
pub struct KvCache {
    policy: CachePolicy,
    dims: CacheDims,
    strict: bool,
    history: BlockHistory,
    positions: Vec<usize>,
    tokens: Vec<Token>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pending: Option<Token>,
    evicted: usize,
}

impl KvCache {
    /// A cache that rejects tokens breaking the sequence grammar.
    pub fn new(policy: CachePolicy, dims: CacheDims, block_len: usize) -> Result<Self> {
        policy.validate(block_len)?;
        if dims.layers == 0 || dims.heads == 0 || dims.d_head == 0 {
            return Err(Error::Contract(format!("degenerate cache dims {dims:?}")));
        }
        let slots = dims.layers * dims.heads;
        Ok(KvCache {
            policy,
            dims,
            strict: true,
            history: BlockHistory::new(block_len),
            positions: Vec::new(),
            tokens: Vec::new(),
            keys: vec![Vec::new(); slots],
            values: vec![Vec::new(); slots],
            pending: None,
            evicted: 0,
        })
    }

    /// A cache that records grammar violations instead of rejecting them.
    /// A broken image block loses its protection and its anchors.
    pub fn new_lenient(policy: CachePolicy, dims: CacheDims, block_len: usize) -> Result<Self> {
        let mut c = Self::new(policy, dims, block_len)?;
        c.strict = false;
        Ok(c)
    }

    pub fn policy(&self) -> &CachePolicy {
        &self.policy
    }

    pub fn dims(&self) -> CacheDims {
        self.dims
    }

    pub fn history(&self) -> &BlockHistory {
        &self.history
    }

    /// Tokens seen so far, including evicted ones.
    pub fn seen(&self) -> usize {
        self.history.len()
    }

    /// Number of resident entries.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn evicted(&self) -> usize {
        self.evicted
    }

    /// Original positions of the resident entries, ascending.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Flat `len * d_head` keys for one (layer, head).
    pub fn keys(&self, layer: usize, head: usize) -> &[f64] {
        &self.keys[layer * self.dims.heads + head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &[f64] {
        &self.values[layer * self.dims.heads + head]
    }

    /// Mutable values for one (layer, head), for perturbation experiments.
    pub fn values_mut(&mut self, layer: usize, head: usize) -> &mut [f64] {
        &mut self.values[layer * self.dims.heads + head]
    }

    /// Starts a step: records `token` in the structural history and evicts
    /// every entry outside the retained set of the extended prefix. Returns
    /// the cache position the new entry will take. Must be followed by
    /// [`KvCache::commit`].
    pub fn prepare(&mut self, token: Token) -> Result<(usize, StepEvent)> {
        if self.pending.is_some() {
            return Err(Error::State("prepare called twice without commit".into()));
        }
        if let Token::Img(s) = token {
            if s as usize >= self.history.block_len() {
                return Err(Error::Range {
                    what: "image slot",
                    value: s as i64,
                    range: format!("0..{}", self.history.block_len()),
                });
            }
        }
        let event = self.history.advance(token, self.strict)?;
        let t = self.history.len();
        let keep = retain_positions(&self.policy, &self.history);
        debug_assert_eq!(keep.last(), Some(&(t - 1)));
        self.evict_to(&keep[..keep.len() - 1])?;
        self.pending = Some(token);
        Ok((self.positions.len(), event))
    }

    /// Appends the pending token's keys and values, one `heads * d_head`
    /// vector per layer.
    pub fn commit(&mut self, keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<()> {
        let Some(token) = self.pending else {
            return Err(Error::State("commit without prepare".into()));
        };
        let width = self.dims.layer_width();
        if keys.len() != self.dims.layers
            || values.len() != self.dims.layers
            || keys.iter().chain(values).any(|v| v.len() != width)
        {
            return Err(Error::Contract(format!(
                "expected {} layers of width {width}",
                self.dims.layers
            )));
        }
        let d = self.dims.d_head;
        for l in 0..self.dims.layers {
            for h in 0..self.dims.heads {
                let slot = l * self.dims.heads + h;
                self.keys[slot].extend_from_slice(&keys[l][h * d..(h + 1) * d]);
                self.values[slot].extend_from_slice(&values[l][h * d..(h + 1) * d]);
            }
        }
        self.positions.push(self.history.len() - 1);
        self.tokens.push(token);
        self.pending = None;
        Ok(())
    }

    /// Appends one token with its per-layer keys and values and applies the
    /// policy's eviction.
    pub fn push(&mut self, token: Token, keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<StepEvent> {
        let width = self.dims.layer_width();
        if keys.len() != self.dims.layers
            || values.len() != self.dims.layers
            || keys.iter().chain(values).any(|v| v.len() != width)
        {
            return Err(Error::Contract(format!(
                "expected {} layers of width {width}",
                self.dims.layers
            )));
        }
        let (_, event) = self.prepare(token)?;
        self.commit(keys, values)?;
        Ok(event)
    }

    fn evict_to(&mut self, keep: &[usize]) -> Result<()> {
        if keep.len() == self.positions.len() {
            debug_assert_eq!(keep, &self.positions[..]);
            return Ok(());
        }
        let mut mask = vec![false; self.positions.len()];
        let mut j = 0;
        for &p in keep {
            while j < self.positions.len() && self.positions[j] < p {
                j += 1;
            }
            if j == self.positions.len() || self.positions[j] != p {
                return Err(Error::State(format!(
                    "position {p} must be retained but was already evicted"
                )));
            }
            mask[j] = true;
        }
        let d = self.dims.d_head;
        let mut w = 0;
        for r in 0..self.positions.len() {
            if mask[r] {
                if w != r {
                    self.positions[w] = self.positions[r];
                    self.tokens[w] = self.tokens[r];
                    for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
                        buf.copy_within(r * d..(r + 1) * d, w * d);
                    }
                }
                w += 1;
            }
        }
        self.evicted += self.positions.len() - w;
        self.positions.truncate(w);
        self.tokens.truncate(w);
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            buf.truncate(w * d);
        }
        Ok(())
    }
}

/// Rank of every resident original position: `orig_pos -> cache_pos`.
pub fn remap_positions(cache: &KvCache) -> BTreeMap<usize, usize> {
    cache
        .positions()
        .iter()
        .enumerate()
        .map(|(rank, &p)| (p, rank))
        .collect()
}

impl KvCache {
    pub fn remap_positions(&self) -> BTreeMap<usize, usize> {
        remap_positions(self)
    }
}
