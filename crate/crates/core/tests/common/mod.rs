#![allow(dead_code)]

use contin_core::model::{ModelConfig, WeightSet};
use contin_core::score::{ContinuationTask, Note, Score};
use proptest::prelude::*;

pub fn note(start: u32, pitch: u8, duration: u32) -> Note {
    Note::new(start, pitch, duration).unwrap()
}

/// Scores with starts below `max_start` and durations in `1..=max_dur`.
pub fn score(max_start: u32, max_dur: u32, max_notes: usize) -> impl Strategy<Value = Score> {
    prop::collection::vec((0..max_start, 0u8..=127, 1..=max_dur), 0..max_notes)
        .prop_map(|v| Score::from_notes(v.into_iter().map(|(s, p, d)| note(s, p, d)).collect()))
}

pub fn task() -> impl Strategy<Value = ContinuationTask> {
    let gen = prop::collection::vec((80u32..=271, 0u8..=127, 1u32..=200), 0..40)
        .prop_map(|v| Score::from_notes(v.into_iter().map(|(s, p, d)| note(s, p, d)).collect()));
    (score(80, 200, 40), prop::option::of(gen)).prop_map(|(p, g)| ContinuationTask::new(p, g).unwrap())
}

pub fn micro_config(vocab: usize) -> ModelConfig {
    ModelConfig::micro(2, 16, 32, vocab, 2, 4)
}

pub fn micro_weights(vocab: usize, seed: u64) -> WeightSet {
    WeightSet::random_uniform(&micro_config(vocab), 0.5, seed).unwrap()
}
