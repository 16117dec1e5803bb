//! Retention policies and the evicting key/value cache.
//!
//! A policy maps the structural history of a prefix of length `t` to the set
//! of positions whose key/value entries stay resident. All policies keep the
//! full prefix while `t <= window`.

mod cache;

pub use cache::{CacheDims, KvCache};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::seqmodel::{BlockHistory, MultimodalSequence};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase", deny_unknown_fields)]
pub enum CachePolicy {
    /// Every entry is kept.
    Dense,
    /// The most recent `window` entries.
    Window { window: usize },
    /// The first `n_sink` entries plus the most recent `window - n_sink`.
    #[serde(rename = "sink")]
    AttentionSink { n_sink: usize, window: usize },
    /// Attention sink plus, for every completed image block, its BoI, the
    /// first `k_head` and last `k_tail` slots, and its EoI. An image block
    /// still being generated is kept whole.
    #[serde(rename = "mmsink")]
    MultimodalSink {
        n_sink: usize,
        k_head: usize,
        k_tail: usize,
        window: usize,
    },
}

impl CachePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            CachePolicy::Dense => "dense",
            CachePolicy::Window { .. } => "window",
            CachePolicy::AttentionSink { .. } => "sink",
            CachePolicy::MultimodalSink { .. } => "mmsink",
        }
    }

    /// `None` for [`CachePolicy::Dense`].
    pub fn window(&self) -> Option<usize> {
        match *self {
            CachePolicy::Dense => None,
            CachePolicy::Window { window }
            | CachePolicy::AttentionSink { window, .. }
            | CachePolicy::MultimodalSink { window, .. } => Some(window),
        }
    }

    /// Checks parameter positivity, `n_sink < window` and that the anchors
    /// fit inside one image block of `block_len` slots.
    pub fn validate(&self, block_len: usize) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{}: {name} must be positive", self.name())))
            } else {
                Ok(())
            }
        };
        match *self {
            CachePolicy::Dense => Ok(()),
            CachePolicy::Window { window } => positive("window", window),
            CachePolicy::AttentionSink { n_sink, window } => {
                positive("window", window)?;
                positive("n_sink", n_sink)?;
                check_sink(n_sink, window)
            }
            CachePolicy::MultimodalSink {
                n_sink,
                k_head,
                k_tail,
                window,
            } => {
                positive("window", window)?;
                positive("n_sink", n_sink)?;
                positive("k_head", k_head)?;
                positive("k_tail", k_tail)?;
                check_sink(n_sink, window)?;
                if k_head + k_tail > block_len {
                    return Err(Error::Config(format!(
                        "mmsink: k_head + k_tail = {} exceeds image block length {block_len}",
                        k_head + k_tail
                    )));
                }
                Ok(())
            }
        }
    }
}

fn check_sink(n_sink: usize, window: usize) -> Result<()> {
    if n_sink >= window {
        return Err(Error::Config(format!(
            "n_sink ({n_sink}) must be smaller than window ({window})"
        )));
    }
    Ok(())
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CachePolicy::Dense => write!(f, "dense"),
            CachePolicy::Window { window } => write!(f, "window(w={window})"),
            CachePolicy::AttentionSink { n_sink, window } => {
                write!(f, "sink(n={n_sink}, w={window})")
            }
            CachePolicy::MultimodalSink {
                n_sink,
                k_head,
                k_tail,
                window,
            } => write!(
                f,
                "mmsink(n={n_sink}, k_head={k_head}, k_tail={k_tail}, w={window})"
            ),
        }
    }
}

/// Positions kept for every completed block: BoI, `k_head` leading slots,
/// `k_tail` trailing slots and EoI.
pub fn anchors_per_block(k_head: usize, k_tail: usize) -> usize {
    2 + k_head + k_tail
}

/// Retained positions, ascending, for a prefix described by `history`
/// (`t = history.len()`).
pub fn retain_positions(policy: &CachePolicy, history: &BlockHistory) -> Vec<usize> {
    let t = history.len();
    let window = match policy.window() {
        Some(w) if t > w => w,
        _ => return (0..t).collect(),
    };
    match *policy {
        CachePolicy::Dense => unreachable!(),
        CachePolicy::Window { .. } => (t - window..t).collect(),
        CachePolicy::AttentionSink { n_sink, .. } => {
            (0..n_sink).chain(t - (window - n_sink)..t).collect()
        }
        CachePolicy::MultimodalSink {
            n_sink,
            k_head,
            k_tail,
            ..
        } => {
            let recent = t - (window - n_sink);
            let mut out: Vec<usize> = (0..n_sink).collect();
            for &(boi, eoi) in history.completed() {
                if eoi < recent {
                    out.extend(boi..=boi + k_head);
                    out.extend(eoi - k_tail..=eoi);
                } else if boi < recent {
                    // Block straddles the window edge.
                    out.extend((boi..=boi + k_head).filter(|&p| p < recent));
                    out.extend((eoi - k_tail..=eoi).filter(|&p| p < recent));
                }
            }
            if let Some(open) = history.open() {
                out.extend(open.boi..recent);
            }
            out.extend(recent..t);
            out.sort_unstable();
            out.dedup();
            out
        }
    }
}

/// Retained positions for a validated prefix. `t` must equal its length.
pub fn retain_set(
    policy: &CachePolicy,
    prefix: &MultimodalSequence,
    t: usize,
) -> Result<Vec<usize>> {
    if t == 0 || t != prefix.len() {
        return Err(Error::Contract(format!(
            "retain_set: t = {t} but prefix has {} tokens",
            prefix.len()
        )));
    }
    Ok(retain_positions(policy, prefix.history()))
}

pub fn entry_count(policy: &CachePolicy, history: &BlockHistory) -> usize {
    retain_positions(policy, history).len()
}

/// Bytes held by `count` entries: keys and values for every layer and head.
pub fn bytes_estimate(count: usize, dims: CacheDims, scalar_width: usize) -> usize {
    count * dims.layers * dims.heads * 2 * dims.d_head * scalar_width
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::Token;

    fn text_history(t: usize) -> BlockHistory {
        let mut toks = vec![Token::Bos];
        toks.extend((1..t).map(|i| Token::Text(i as u32)));
        BlockHistory::scan_lenient(&toks, 4)
    }

    #[test]
    fn dense_and_window_examples() {
        let h = text_history(5);
        assert_eq!(retain_positions(&CachePolicy::Dense, &h), vec![0, 1, 2, 3, 4]);
        assert_eq!(
            retain_positions(&CachePolicy::Window { window: 3 }, &h),
            vec![2, 3, 4]
        );
    }

    #[test]
    fn sink_example() {
        let p = CachePolicy::AttentionSink { n_sink: 1, window: 3 };
        assert_eq!(retain_positions(&p, &text_history(10)), vec![0, 8, 9]);
    }

    #[test]
    fn mmsink_example() {
        // BoI@2, Img@3..6, EoI@7, t = 12.
        let mut toks = vec![Token::Bos, Token::Text(0), Token::Boi];
        toks.extend((0..4).map(Token::Img));
        toks.push(Token::Eoi);
        toks.extend((0..4).map(Token::Text));
        let seq = MultimodalSequence::new(toks, 4).unwrap();
        let p = CachePolicy::MultimodalSink {
            n_sink: 1,
            k_head: 1,
            k_tail: 1,
            window: 4,
        };
        assert_eq!(retain_set(&p, &seq, 12).unwrap(), vec![0, 2, 3, 6, 7, 9, 10, 11]);
        assert!(matches!(retain_set(&p, &seq, 11), Err(Error::Contract(_))));
    }

    #[test]
    fn full_prefix_within_window() {
        let h = text_history(6);
        for p in [
            CachePolicy::Window { window: 6 },
            CachePolicy::AttentionSink { n_sink: 2, window: 6 },
            CachePolicy::MultimodalSink {
                n_sink: 2,
                k_head: 1,
                k_tail: 1,
                window: 9,
            },
        ] {
            assert_eq!(retain_positions(&p, &h), (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn validation_rules() {
        assert!(CachePolicy::Window { window: 0 }.validate(8).is_err());
        assert!(CachePolicy::AttentionSink { n_sink: 4, window: 4 }.validate(8).is_err());
        let mm = |k_head, k_tail| CachePolicy::MultimodalSink {
            n_sink: 1,
            k_head,
            k_tail,
            window: 16,
        };
        assert!(mm(4, 4).validate(8).is_ok());
        assert!(mm(5, 4).validate(8).is_err());
        assert!(mm(0, 4).validate(8).is_err());
    }

    #[test]
    fn policy_serde_uses_cli_names() {
        let p = CachePolicy::MultimodalSink {
            n_sink: 4,
            k_head: 1,
            k_tail: 2,
            window: 64,
        };
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains(r#""policy":"mmsink""#), "{s}");
        assert_eq!(serde_json::from_str::<CachePolicy>(&s).unwrap(), p);
    }

    #[test]
    fn bytes_formula() {
        let dims = CacheDims {
            layers: 2,
            heads: 2,
            d_head: 32,
        };
        assert_eq!(bytes_estimate(100, dims, 8), 100 * 2 * 2 * 2 * 32 * 8);
    }
}
