//! Shared workloads for the criterion benchmarks.

use mmsink_core::engine::{generate, GenerateOptions};
use mmsink_core::seqmodel::{story_prompt, synth_stories};
use mmsink_core::{CachePolicy, Model, ModelConfig, MultimodalSequence, Token};

pub const WINDOW: usize = 64;

/// The four policies at desk settings.
pub fn policies() -> [CachePolicy; 4] {
    [
        CachePolicy::Dense,
        CachePolicy::Window { window: WINDOW },
        CachePolicy::AttentionSink {
            n_sink: 4,
            window: WINDOW,
        },
        CachePolicy::MultimodalSink {
            n_sink: 4,
            k_head: 1,
            k_tail: 2,
            window: WINDOW,
        },
    ]
}

/// A fresh desk model and a two-item prompt.
pub fn desk_workload(seed: u64) -> (Model, MultimodalSequence) {
    let model = Model::new(ModelConfig {
        seed,
        ..ModelConfig::desk()
    })
    .expect("desk config is valid");
    let story = synth_stories(1, 2, seed, model.config.seq.d_feat).remove(0);
    let prompt = story_prompt(&story, 2, &model.config.seq).expect("prompt fits");
    (model, prompt)
}

/// A dense argmax trajectory of `steps` tokens after the prompt.
pub fn trajectory(model: &Model, prompt: &MultimodalSequence, steps: usize) -> Vec<Token> {
    let opts = GenerateOptions {
        steps,
        ..GenerateOptions::default()
    };
    generate(model, prompt, CachePolicy::Dense, opts)
        .expect("dense decoding succeeds")
        .tokens
}
