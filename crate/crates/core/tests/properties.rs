mod common;

use std::collections::{BTreeMap, BTreeSet};

use agentrl::curation::{empirical_difficulty_filter, filter_external_knowledge, DatasetRecord, DifficultyConfig, FixtureSampler};
use agentrl::faithfulness::{report_from_records, CropVerdict, FaithfulnessRecord};
use agentrl::judge::MockJudge;
use agentrl::reward::{total_reward, RewardWeights};
use agentrl::tapo::{advantages, clipped_term, group_baseline, standardized_advantages};
use agentrl::trajectory::{parse_transcript_lenient, serialize_trajectory, TrajectoryRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn trajectory_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = common::random_trajectory(&mut rng, 0);
        let rec = TrajectoryRecord::from_trajectory(&t);
        let line = serde_json::to_string(&rec).unwrap();
        let back: TrajectoryRecord = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back.to_trajectory(8).unwrap(), t.clone());
        let parsed = parse_transcript_lenient(&serialize_trajectory(&t)).unwrap();
        prop_assert_eq!(parsed.actions.len(), t.actions().len());
        prop_assert_eq!(&parsed.observations, t.observations());
    }

    #[test]
    fn advantages_sum_to_zero(rewards in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let b = group_baseline(&rewards).unwrap();
        let s: f64 = advantages(&rewards, b).iter().sum();
        prop_assert!(s.abs() < 1e-9);
    }

    #[test]
    fn advantages_scale_and_shift(
        rewards in prop::collection::vec(-5.0f64..5.0, 2..12),
        c in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let a = advantages(&rewards, group_baseline(&rewards).unwrap());
        let moved: Vec<f64> = rewards.iter().map(|r| c * r + shift).collect();
        let am = advantages(&moved, group_baseline(&moved).unwrap());
        for (x, y) in a.iter().zip(&am) {
            prop_assert!((c * x - y).abs() < 1e-9 * (1.0 + c * x.abs()));
        }
        let sa = standardized_advantages(&rewards, group_baseline(&rewards).unwrap());
        let sm = standardized_advantages(&moved, group_baseline(&moved).unwrap());
        for (x, y) in sa.iter().zip(&sm) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn clip_is_inactive_inside_band(eps in 0.01f64..0.5, u in 0.0f64..=1.0, a in -5.0f64..5.0) {
        let r = 1.0 - eps + 2.0 * eps * u;
        prop_assert_eq!(clipped_term(r, a, eps), r * a);
    }

    #[test]
    fn clipped_term_never_exceeds_unclipped(r in 0.01f64..5.0, a in -5.0f64..5.0, eps in 0.01f64..0.5) {
        prop_assert!(clipped_term(r, a, eps) <= r * a + 1e-12);
    }

    #[test]
    fn reward_stays_within_weight_bounds(
        case in 0usize..25,
        lambda_acc in 0.5f64..3.0,
        frac in -0.99f64..0.99,
        fmt_max in 0.0f64..1.0,
        penalty in -2.0f64..-0.01,
    ) {
        let cases = common::reward_cases();
        let c = &cases[case];
        let w = RewardWeights { lambda_acc, lambda_tool: frac * lambda_acc, fmt_max, redline_penalty: penalty };
        let b = total_reward(&c.traj, c.gold, c.kind, &w, &MockJudge::new(), &c.scorer, &c.artifacts).unwrap();
        let tool_span = w.lambda_tool.abs() * penalty.abs().max(1.0);
        prop_assert!(b.total >= -tool_span - 1e-12);
        prop_assert!(b.total <= lambda_acc + tool_span + fmt_max + 1e-12);
        prop_assert!(b.r_fmt == 0.0 || b.r_fmt == fmt_max);
        prop_assert!(b.r_acc == 0.0 || b.r_acc == 1.0);
    }

    #[test]
    fn faithfulness_rates_decompose(
        examples in prop::collection::vec((any::<bool>(), prop::collection::vec(0u8..=1, 0..4)), 1..40),
        flip in any::<prop::sample::Index>(),
    ) {
        let build = |ex: &[(bool, Vec<u8>)]| -> Vec<FaithfulnessRecord> {
            ex.iter().enumerate().map(|(i, (correct, verdicts))| {
                let crops = verdicts.iter().enumerate()
                    .map(|(j, v)| CropVerdict { crop_id: format!("c{j}"), verdict: *v })
                    .collect();
                FaithfulnessRecord::new(i.to_string(), crops, *correct, verdicts.len())
            }).collect()
        };
        let recs = build(&examples);
        for (r, (_, v)) in recs.iter().zip(&examples) {
            prop_assert_eq!(r.any_crop, v.contains(&1));
        }
        let rep = report_from_records(&recs);
        prop_assert!((rep.unconditional_faithful - rep.conditional_faithful * rep.accuracy).abs() < 1e-12);
        if rep.correct > 0 {
            let no_pass = recs.iter().filter(|r| r.answer_correct && !r.any_crop).count() as f64 / rep.correct as f64;
            prop_assert!((rep.conditional_faithful + no_pass - 1.0).abs() < 1e-12);
        }
        let total: f64 = rep.histogram.values().map(|b| b.fraction_total).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);

        // turning one failing crop into a passing one never lowers a rate
        let mut raised = examples.clone();
        let i = flip.index(raised.len());
        if let Some(v) = raised[i].1.iter_mut().find(|v| **v == 0) {
            *v = 1;
        }
        let up = report_from_records(&build(&raised));
        prop_assert!(up.conditional_faithful >= rep.conditional_faithful);
        prop_assert!(up.unconditional_faithful >= rep.unconditional_faithful);
    }

    #[test]
    fn filters_are_idempotent(
        sources in prop::collection::vec(0usize..4, 1..30),
        hits in prop::collection::vec(0usize..=8, 30),
    ) {
        let names = ["OK-VQA", "ok-vqa", "GQA", "V*"];
        let records: Vec<DatasetRecord> = sources.iter().enumerate()
            .map(|(i, s)| DatasetRecord::new(&format!("r{i}"), names[*s], "q?", "A"))
            .collect();
        let blacklist: BTreeSet<String> = ["OK-VQA".to_string()].into();
        let once = filter_external_knowledge(&records, &blacklist);
        prop_assert_eq!(filter_external_knowledge(&once, &blacklist), once.clone());
        prop_assert!(once.iter().all(|r| r.source.to_lowercase() != "ok-vqa"));

        let bits: BTreeMap<String, Vec<bool>> = records.iter().enumerate()
            .filter(|(i, _)| i % 7 != 3)
            .map(|(i, r)| (r.record_id.clone(), (0..8).map(|j| j < hits[i]).collect()))
            .collect();
        let sampler = FixtureSampler { bits };
        let cfg = DifficultyConfig::default();
        let kept = empirical_difficulty_filter(&once, &sampler, &cfg).unwrap();
        prop_assert_eq!(empirical_difficulty_filter(&kept, &sampler, &cfg).unwrap(), kept.clone());
        prop_assert!(kept.iter().all(|r| r.empirical_accuracy.is_none_or(|a| a <= 0.9)));
    }
}
