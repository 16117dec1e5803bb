//! Retention policies for the key/value cache of an autoregressive model that
//! generates interleaved text and image-slot tokens.
//!
//! The crate is organised bottom-up:
//!
//! * [`seqmodel`]: token taxonomy, interleaved sequences, story files and
//!   training-sequence assembly.
//! * [`cachepolicy`]: the four retention policies (dense, window, attention
//!   sink, multimodal sink) and the evicting [`cachepolicy::KvCache`].
//! * [`engine`]: a small deterministic decoder-only transformer that decodes
//!   over a [`cachepolicy::KvCache`].
//! * [`losses`]: next-token cross entropy, cosine feature regression and a
//!   toy gradient-descent trainer with hand-written backpropagation.
//! * [`attnstats`]: per-key mean attention, top-k selection and occurrence
//!   tables over attention maps.
//! * [`bench`]: side-by-side policy comparison reports.

pub mod attnstats;
pub mod bench;
pub mod cachepolicy;
pub mod engine;
mod error;
pub mod losses;
pub mod seqmodel;

pub use cachepolicy::{CachePolicy, KvCache};
pub use engine::{Model, ModelConfig};
pub use error::{Error, Result};
pub use seqmodel::{MultimodalSequence, SeqConfig, Story, Token, TrainingSample};
