//! Property tests for the numeric invariants of each module.

use std::collections::HashSet;

use needforge::curation::{curate, flag_outliers, sample_quota, CurationConfig};
use needforge::domain::HierarchicalDecision;
use needforge::envsim::{generate_users, generate_world, World, WorldSpec};
use needforge::eval::{evaluate, hr_at_k, ndcg_at_k, EvalExample, RankedPrediction, SliceDef};
use needforge::policy::{nucleus_support, DecisionStage, HierarchicalPolicy, PolicyMode, SamplingConfig};
use needforge::reward::{length_reward, RewardParams};
use needforge::trainer::sample_episodes;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_world(masked: bool) -> World {
    generate_world(&WorldSpec {
        n_needs: 3,
        n_categories: 5,
        n_behaviors: 9,
        n_archetypes: 2,
        support_masks: masked,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn random_policy(world: &World, mode: PolicyMode, temperature: f64, seed: u64) -> HierarchicalPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampling = SamplingConfig { temperature, top_p: 1.0, n: 1 };
    let mut pol = HierarchicalPolicy::for_world(world, mode, sampling);
    pol.params.flat_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    pol
}

/// Every valid (need, category, behavior) path of the world.
fn all_paths(world: &World) -> Vec<HierarchicalDecision> {
    let tax = &world.taxonomy;
    let mut out = Vec::new();
    for n in 0..tax.n_needs() {
        for c in 0..tax.n_categories() {
            if let Some(sup) = &world.category_support {
                if !sup[n][c] {
                    continue;
                }
            }
            for &b in tax.behaviors_of(c) {
                out.push(HierarchicalDecision::new(n, c, b));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn path_probabilities_sum_to_one(seed in 0u64..1000, temp in 0.3f64..3.0, masked in any::<bool>()) {
        let world = small_world(masked);
        let pol = random_policy(&world, PolicyMode::Hierarchical, temp, seed);
        let ep = &sample_episodes(&world, 1, (0, 5), seed)[0];
        let paths = all_paths(&world);
        let total: f64 = paths.iter().map(|d| pol.logprob(&ep.state, d).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "total {total}");

        // Behavior marginal agrees with brute-force enumeration.
        let mut brute = vec![0.0; world.taxonomy.n_behaviors()];
        for d in &paths {
            brute[d.behavior_id] += pol.logprob(&ep.state, d).unwrap().exp();
        }
        for (a, b) in pol.marginals(&ep.state).behavior.iter().zip(&brute) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_policy_is_normalized(seed in 0u64..1000, temp in 0.3f64..3.0) {
        let world = small_world(false);
        let pol = random_policy(&world, PolicyMode::Flat, temp, seed);
        let ep = &sample_episodes(&world, 1, (0, 5), seed)[0];
        let tax = &world.taxonomy;
        let total: f64 = (0..tax.n_behaviors())
            .map(|b| {
                let d = HierarchicalDecision { need_id: None, category_id: tax.behaviors()[b].category_id, behavior_id: b, reasoning: vec![] };
                pol.logprob(&ep.state, &d).unwrap().exp()
            })
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn temperature_preserves_argmax(seed in 0u64..1000, temp in 0.1f64..5.0) {
        let world = small_world(false);
        let base = random_policy(&world, PolicyMode::Hierarchical, 1.0, seed);
        let mut hot = base.clone();
        hot.sampling.temperature = temp;
        let ep = &sample_episodes(&world, 1, (0, 5), seed)[0];
        let argmax = |p: Vec<f64>| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        for stage in [DecisionStage::Need, DecisionStage::Category, DecisionStage::Behavior] {
            prop_assert_eq!(argmax(base.stage_probs(stage, &ep.state, 1, 2)), argmax(hot.stage_probs(stage, &ep.state, 1, 2)));
        }
    }

    #[test]
    fn entropy_total_is_bounded(seed in 0u64..1000, temp in 0.3f64..3.0) {
        let world = small_world(true);
        let pol = random_policy(&world, PolicyMode::Hierarchical, temp, seed);
        let ep = &sample_episodes(&world, 1, (0, 5), seed)[0];
        let h = pol.entropy(&ep.state);
        let bound = (all_paths(&world).len() as f64).ln();
        prop_assert!(h.need >= 0.0 && h.category >= 0.0 && h.behavior >= 0.0);
        prop_assert!(h.total <= bound + 1e-9, "{} > {}", h.total, bound);
    }

    #[test]
    fn nucleus_keeps_enough_mass(raw in prop::collection::vec(0.0f64..1.0, 1..20), top_p in 0.05f64..1.0) {
        let sum: f64 = raw.iter().sum();
        prop_assume!(sum > 1e-6);
        let probs: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        let kept = nucleus_support(&probs, top_p);
        prop_assert!(!kept.is_empty());
        let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
        prop_assert!(mass >= top_p - 1e-9);
        for w in kept.windows(2) {
            prop_assert!(probs[w[0]] >= probs[w[1]]);
        }
        // Dropped tokens are never more likely than kept ones.
        let min_kept = kept.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
        let set: HashSet<usize> = kept.iter().copied().collect();
        for (i, p) in probs.iter().enumerate() {
            if !set.contains(&i) {
                prop_assert!(*p < min_kept);
            }
        }
    }

    #[test]
    fn length_reward_bounded_and_monotone(t1 in 0.0f64..400.0, t2 in 0.0f64..400.0, step in 0.0f64..5000.0) {
        let p = RewardParams::default();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (a, b) = (length_reward(true, lo, step, &p), length_reward(true, hi, step, &p));
        prop_assert!((0.0..=p.alpha).contains(&a));
        prop_assert!(a >= b);
        prop_assert!(length_reward(true, lo, step + 1.0, &p) <= a);
        prop_assert_eq!(length_reward(false, lo, step, &p), 0.0);
    }

    #[test]
    fn ranking_metrics_bounds(perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(), truth in 0usize..12) {
        let pred = RankedPrediction::new(perm, truth).unwrap();
        let mut prev = (0.0, 0.0);
        for k in 1..=12 {
            let (hr, ndcg) = (hr_at_k(&pred, k), ndcg_at_k(&pred, k));
            prop_assert!(ndcg <= hr + 1e-12 && (0.0..=1.0).contains(&ndcg));
            prop_assert!(hr >= prev.0 && ndcg >= prev.1);
            prev = (hr, ndcg);
        }
        prop_assert_eq!(prev.0, 1.0);
    }

    #[test]
    fn evaluation_ignores_example_order(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut examples: Vec<EvalExample> = (0..40)
            .map(|i| {
                let probs: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
                EvalExample {
                    user_id: format!("u{i}"),
                    sequence_len: rng.gen_range(2..8),
                    need: Some((rng.gen_range(0..3), rng.gen_range(0..3))),
                    category: RankedPrediction::from_probabilities(&probs, rng.gen_range(0..8)),
                    behavior: None,
                }
            })
            .collect();
        let slices = [SliceDef::cold_start(), "len=3..5".parse().unwrap()];
        let before = evaluate(&examples, &slices).unwrap();
        examples.reverse();
        examples.swap(0, 17);
        let after = evaluate(&examples, &slices).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        let (x, y) = (before.overall.category.unwrap(), after.overall.category.unwrap());
        prop_assert!(close(x.hr_at_1, y.hr_at_1) && close(x.ndcg_at_5, y.ndcg_at_5));
        prop_assert_eq!(before.overall.n_examples, after.overall.n_examples);
        prop_assert_eq!(before.overall.need_accuracy, after.overall.need_accuracy);
        for (name, s) in &before.slices {
            prop_assert_eq!(s.n_examples, after.slices[name].n_examples);
        }
    }

    #[test]
    fn sample_quota_is_a_ceiling(rate in 0.0f64..=1.0, count in 0usize..500) {
        let q = sample_quota(rate, count);
        prop_assert!(q <= count);
        prop_assert!(q as f64 >= rate * count as f64 - 1e-6);
        prop_assert!((q as f64) < rate * count as f64 + 1.0);
    }

    #[test]
    fn outlier_flags_follow_threshold(scores in prop::collection::vec(-10.0f64..10.0, 2..60), z in 0.5f64..3.0) {
        let flags = flag_outliers(&scores, z);
        prop_assert_eq!(flags.len(), scores.len());
        // Raising the threshold can only remove outliers.
        let stricter = flag_outliers(&scores, z + 1.0);
        for (a, b) in flags.iter().zip(&stricter) {
            prop_assert!(a.is_outlier() || !b.is_outlier());
        }
    }
}

#[test]
fn curated_users_are_unique_inliers() {
    let world = generate_world(&WorldSpec { noise_rate: 0.2, seed: 9, ..Default::default() }).unwrap();
    let users = generate_users(&world, 300, (2, 20), 9);
    let cfg = CurationConfig { k: 6, ..Default::default() };
    let out = curate(&users, &world.taxonomy, &cfg).unwrap();
    let unique: HashSet<usize> = out.selected.iter().copied().collect();
    assert_eq!(unique.len(), out.selected.len());
    for &i in &out.selected {
        assert!(!out.flags[i].is_outlier());
    }
    assert_eq!(out.curated.len(), out.selected.len());
    let again = curate(&users, &world.taxonomy, &cfg).unwrap();
    assert_eq!(again.selected, out.selected);
}

/// Empirical path frequencies from `sample` match the analytic joint.
#[test]
fn sampling_frequencies_match_probabilities() {
    let world = small_world(true);
    let pol = random_policy(&world, PolicyMode::Hierarchical, 1.0, 42);
    let ep = &sample_episodes(&world, 1, (0, 5), 42)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 40_000;
    let cfg = SamplingConfig { temperature: 1.0, top_p: 1.0, n };
    let draws = pol.sample(&ep.state, &cfg, &mut rng).unwrap();
    for d in all_paths(&world) {
        let p = pol.logprob(&ep.state, &d).unwrap().exp();
        let freq = draws
            .iter()
            .filter(|s| s.decision.need_id == d.need_id && s.decision.behavior_id == d.behavior_id)
            .count() as f64
            / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 5.0 * sd + 1e-3, "{d:?}: freq {freq} vs p {p}");
    }
}
