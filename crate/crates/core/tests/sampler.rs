mod common;

use common::{micro_weights, note};
use contin_core::remi::{decode, DecodeMode, TokenId, TokenSet};
use contin_core::sampler::{generate_continuation, sample_token, transform_logits, GenerationBudget, SamplerParams, TOP_P_EPS};
use contin_core::score::{ContinuationTask, Score};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn plain(top_k: Option<usize>, top_p: f64) -> SamplerParams {
    SamplerParams { top_k, top_p, ..SamplerParams::default() }
}

fn support(p: &[f64]) -> Vec<usize> {
    (0..p.len()).filter(|&i| p[i] > 0.0).collect()
}

/// Rank of `i`: ids strictly ahead of it (higher logit, or equal and lower id).
fn ahead(z: &[f32], i: usize) -> Vec<usize> {
    (0..z.len()).filter(|&j| z[j] > z[i] || (z[j] == z[i] && j < i)).collect()
}

proptest! {
    #[test]
    fn top_k_keeps_exactly_the_k_best(z in prop::collection::vec(-8.0f32..8.0, 228), k in 1usize..260) {
        let p = transform_logits(&z, &[], &plain(Some(k), 1.0), &TokenSet::full()).unwrap();
        let expected: Vec<usize> = (0..228).filter(|&i| ahead(&z, i).len() < k).collect();
        prop_assert_eq!(support(&p), expected);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_p_keeps_the_smallest_sufficient_prefix(z in prop::collection::vec(-6.0f32..6.0, 228), top_p in 0.01f64..=1.0) {
        let p = transform_logits(&z, &[], &plain(None, top_p), &TokenSet::full()).unwrap();
        let full = transform_logits(&z, &[], &plain(None, 1.0), &TokenSet::full()).unwrap();
        // an id survives when the mass ranked strictly ahead of it is still short of top_p
        let expected: Vec<usize> = (0..228)
            .filter(|&i| ahead(&z, i).iter().map(|&j| full[j]).sum::<f64>() + TOP_P_EPS < top_p)
            .collect();
        prop_assert_eq!(support(&p), expected);
    }

    #[test]
    fn unit_penalty_is_identity(z in prop::collection::vec(-6.0f32..6.0, 228), recent in prop::collection::vec(0u32..228, 0..64)) {
        let recent: Vec<TokenId> = recent.into_iter().map(|i| TokenId::new(i).unwrap()).collect();
        let params = plain(None, 1.0);
        prop_assert_eq!(
            transform_logits(&z, &recent, &params, &TokenSet::full()).unwrap(),
            transform_logits(&z, &[], &params, &TokenSet::full()).unwrap()
        );
    }

    #[test]
    fn mask_is_respected(z in prop::collection::vec(-6.0f32..6.0, 228), ids in prop::collection::btree_set(0u32..228, 1..20), seed in any::<u64>()) {
        let legal: TokenSet = ids.iter().map(|&i| TokenId::new(i).unwrap()).collect();
        let p = transform_logits(&z, &[], &SamplerParams::default(), &legal).unwrap();
        for i in support(&p) {
            prop_assert!(ids.contains(&(i as u32)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_token(&p, &mut rng);
        prop_assert!(legal.contains(t));
    }
}

fn fixture() -> ContinuationTask {
    let prompt = Score::from_notes(vec![note(0, 60, 4), note(4, 64, 4), note(16, 67, 8), note(40, 72, 2), note(79, 48, 16)]);
    ContinuationTask::new(prompt, None).unwrap()
}

#[test]
fn continuations_are_valid_for_many_seeds() {
    let w = micro_weights(228, 2);
    for seed in 0..20 {
        let params = SamplerParams { seed, ..SamplerParams::default() };
        let c = generate_continuation(&w, &fixture(), &params, &GenerationBudget::default()).unwrap();
        assert_eq!(c.bars, 12);
        assert!(!c.truncated);
        let d = decode(&c.tokens, 80, DecodeMode::Strict).unwrap();
        assert_eq!(d.bars, 12);
        assert!(c.score.notes().iter().all(|n| (80..=271).contains(&n.start)));
        fixture().with_generation(c.score).unwrap();
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let w = micro_weights(228, 3);
    let params = SamplerParams { seed: 17, temperature: 0.8, repetition_penalty: 1.2, ..SamplerParams::default() };
    let a = generate_continuation(&w, &fixture(), &params, &GenerationBudget::default()).unwrap();
    let b = generate_continuation(&w, &fixture(), &params, &GenerationBudget::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tight_budget_still_yields_twelve_bars() {
    let w = micro_weights(228, 5);
    let budget = GenerationBudget { target_bars: 12, max_tokens: 60 };
    let c = generate_continuation(&w, &fixture(), &SamplerParams::default(), &budget).unwrap();
    assert_eq!(c.bars, 12);
    assert!(c.tokens.len() <= 60);
}
