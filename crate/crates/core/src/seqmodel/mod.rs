//! Token taxonomy, interleaved text/image sequences and story data.

mod assemble;
mod sequence;
mod story;
mod token;

pub use assemble::{
    assemble_training_sequence, sample_training_sequence, story_prompt, TrainingSample,
    PROMPT_MARKER, START_MARKER,
};
pub use sequence::{BlockHistory, Expect, MultimodalSequence, OpenBlock, StepEvent};
pub use story::{read_stories, synth_stories, write_stories, Story, StoryItem};
pub use token::{tokenize_text, word_bucket, SeqConfig, Token, PUNCTUATION};
