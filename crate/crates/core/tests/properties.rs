//! Property tests for the metric, reward and GRPO kernels.

use proptest::prelude::*;

use cogdoc_core::corpus::PageSet;
use cogdoc_core::grpo::{
    clipped_objective, importance_ratio, kl_penalty, standardize_advantages,
};
use cogdoc_core::metrics::{anls, perplexity, token_f1, ANLS_THRESHOLD};
use cogdoc_core::orchestrator::parse_page_list;
use cogdoc_core::patterns::chunk_page_range;
use cogdoc_core::reward::reward_localization;

proptest! {
    #[test]
    fn pageset_normalizes(pages in proptest::collection::vec(0u32..40, 0..20)) {
        let set = PageSet::from_pages(pages.iter().copied());
        let collected: Vec<u32> = set.iter().collect();
        let mut expected: Vec<u32> = pages.iter().copied().filter(|p| *p > 0).collect();
        expected.sort_unstable();
        expected.dedup();
        prop_assert_eq!(collected, expected);
    }

    #[test]
    fn localization_reward_in_lattice(
        pred in proptest::collection::btree_set(1u32..8, 0..8),
        gt in proptest::collection::btree_set(1u32..8, 1..8),
    ) {
        let pred = PageSet::from_pages(pred);
        let gt = PageSet::from_pages(gt);
        let value = reward_localization(&pred, &gt).unwrap().value;
        prop_assert!(value == 0.0 || value == 0.5 || value == 1.0);
        if pred == gt {
            prop_assert_eq!(value, 1.0);
        }
    }

    #[test]
    fn advantages_zero_mean_unit_std(
        rewards in proptest::collection::vec(0.0f64..1.0, 2..17),
    ) {
        let adv = standardize_advantages(&rewards).unwrap();
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        let r_mean = rewards.iter().sum::<f64>() / n;
        let r_std = (rewards.iter().map(|r| (r - r_mean) * (r - r_mean)).sum::<f64>() / n).sqrt();
        if r_std > 1e-12 {
            prop_assert!((std - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(adv.iter().all(|a| *a == 0.0));
        }
    }

    #[test]
    fn clipped_objective_bounded(
        ratio in 0.0f64..4.0,
        adv in -3.0f64..3.0,
        eps in 0.01f64..0.5,
    ) {
        let obj = clipped_objective(ratio, adv, eps);
        prop_assert!(obj <= ratio * adv + 1e-15);
        if ratio >= 1.0 - eps && ratio <= 1.0 + eps {
            prop_assert_eq!(obj, ratio * adv);
        }
    }

    #[test]
    fn importance_ratio_clamped(
        logp_new in proptest::collection::vec(-60.0f64..0.0, 1..32),
        logp_old in proptest::collection::vec(-60.0f64..0.0, 1..32),
    ) {
        let n = logp_new.len().min(logp_old.len());
        let r = importance_ratio(&logp_new[..n], &logp_old[..n]).unwrap();
        prop_assert!((1e-6..=1e6).contains(&r));
    }

    #[test]
    fn kl_nonnegative(raw_p in proptest::collection::vec(0.01f64..1.0, 2..16)) {
        let zp: f64 = raw_p.iter().sum();
        let p: Vec<f64> = raw_p.iter().map(|x| x / zp).collect();
        let q = vec![1.0 / p.len() as f64; p.len()];
        prop_assert!(kl_penalty(&p, &q).unwrap() >= -1e-15);
        prop_assert!(kl_penalty(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn anls_bounds_and_identity(a in "[a-z0-9 ]{0,16}", b in "[a-z0-9 ]{1,16}") {
        let variants = [b.clone()];
        let score = anls(&a, &variants, ANLS_THRESHOLD).unwrap();
        prop_assert!((0.0..=1.0).contains(&score));
        let self_score = anls(&b, &variants, ANLS_THRESHOLD).unwrap();
        prop_assert_eq!(self_score, 1.0);
    }

    #[test]
    fn token_f1_symmetric(a in "[a-z ]{0,24}", b in "[a-z ]{0,24}") {
        let f = token_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, token_f1(&b, &a));
    }

    #[test]
    fn perplexity_order_invariant(mut logps in proptest::collection::vec(-8.0f64..0.0, 1..24)) {
        let forward = perplexity(&logps).unwrap();
        logps.reverse();
        let backward = perplexity(&logps).unwrap();
        prop_assert!((forward - backward).abs() < 1e-9);
        prop_assert!(forward >= 1.0 - 1e-12);
    }

    #[test]
    fn chunks_partition(page_count in 1u32..80, chunk_size in 1u32..9) {
        let chunks = chunk_page_range("d", page_count, chunk_size);
        prop_assert_eq!(chunks.len() as u32, page_count.div_ceil(chunk_size));
        let mut all = Vec::new();
        for c in &chunks {
            all.extend(c.pages.iter());
        }
        prop_assert_eq!(all, (1..=page_count).collect::<Vec<u32>>());
    }

    #[test]
    fn parsed_pages_roundtrip(pages in proptest::collection::vec(1u32..999, 1..12)) {
        let listing = format!(
            "[{}]",
            pages.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
        );
        prop_assert_eq!(parse_page_list(&listing), Some(pages));
    }
}
