mod common;

use proptest::prelude::*;
use rand::Rng;
use unilabel::catalog::ClassHistogram;
use unilabel::splitter::{propose_split, random_split, split_divergence, target_val_size};

use common::{exhaustive_optimum, percentile, plan_oracle_divergence, skewed_counts, split_items};

#[test]
fn target_size_rounding() {
    assert_eq!(target_val_size(5285, 0.2), 1057);
    assert_eq!(target_val_size(10, 0.2), 2);
    assert_eq!(target_val_size(2, 0.2), 1);
    assert_eq!(target_val_size(3, 0.99), 2);
    assert_eq!(target_val_size(7, 0.5), 4);
}

#[test]
fn plan_divergence_matches_oracle() {
    let counts = skewed_counts(&mut common::rng(1), 30, 6);
    let items = split_items(&counts);
    let plan = propose_split(&items, 0.2, 4, 10).unwrap();
    let oracle = plan_oracle_divergence(&counts, &plan.val_records);
    assert!(common::close(plan.divergence, oracle, 1e-12), "{} vs {oracle}", plan.divergence);
    assert!(common::close(plan.recompute_divergence(&items).unwrap(), oracle, 1e-12));
}

#[test]
fn hill_climbing_never_worsens_greedy() {
    let mut rng = common::rng(2);
    for seed in 0..50 {
        let n = rng.random_range(3..40);
        let counts = skewed_counts(&mut rng, n, 5);
        let items = split_items(&counts);
        let greedy = propose_split(&items, 0.25, seed, 0).unwrap();
        let climbed = propose_split(&items, 0.25, seed, 10).unwrap();
        assert!(climbed.divergence <= greedy.divergence + 1e-12);
    }
}

#[test]
fn near_exhaustive_optimum_on_small_instances() {
    let mut rng = common::rng(3);
    let mut worst_gap: f64 = 0.0;
    for case in 0..300u64 {
        let n = rng.random_range(2..=12);
        let classes = rng.random_range(2..7);
        let counts = skewed_counts(&mut rng, n, classes);
        let fraction = [0.2, 0.3, 0.5][case as usize % 3];
        let items = split_items(&counts);
        let plan = propose_split(&items, fraction, case, 10).unwrap();
        let best = exhaustive_optimum(&counts, target_val_size(n, fraction));
        let gap = plan.divergence - best;
        worst_gap = worst_gap.max(gap);
        assert!(
            plan.divergence <= (best * 1.1).max(best + 0.01) + 1e-12,
            "case {case}: n={n} got {} vs optimum {best}",
            plan.divergence
        );
    }
    eprintln!("worst absolute gap to the exhaustive optimum: {worst_gap:.6}");
}

#[test]
fn beats_random_splits_on_skewed_data() {
    let counts = skewed_counts(&mut common::rng(7), 50, 8);
    let items = split_items(&counts);
    let mut random: Vec<f64> = (0..1000)
        .map(|s| plan_oracle_divergence(&counts, &random_split(&items, 0.2, s).unwrap().val_records))
        .collect();
    let p95 = percentile(&mut random, 95.0);
    for seed in 0..20 {
        let plan = propose_split(&items, 0.2, seed, 10).unwrap();
        assert!(plan.divergence <= p95, "seed {seed}: {} > {p95}", plan.divergence);
        assert_eq!(plan, propose_split(&items, 0.2, seed, 10).unwrap());
    }
}

#[test]
fn random_split_membership_is_uniform() {
    // every record lands in validation with probability m / n
    let counts = skewed_counts(&mut common::rng(9), 10, 3);
    let items = split_items(&counts);
    let mut hits = [0u32; 10];
    for seed in 0..1000 {
        let plan = random_split(&items, 0.3, seed).unwrap();
        assert_eq!(plan.val_records.len(), 3);
        for (i, item) in items.iter().enumerate() {
            hits[i] += u32::from(plan.val_records.contains(&item.key));
        }
    }
    for h in hits {
        assert!((250..=350).contains(&h), "{hits:?}");
    }
}

#[test]
fn errors_on_degenerate_requests() {
    let items = split_items(&skewed_counts(&mut common::rng(0), 1, 3));
    assert!(propose_split(&items, 0.2, 0, 10).is_err());
    let items = split_items(&skewed_counts(&mut common::rng(0), 5, 3));
    assert!(propose_split(&items, 0.0, 0, 10).is_err());
    assert!(propose_split(&items, 1.0, 0, 10).is_err());
}

proptest! {
    #![proptest_config(common::prop_config(128))]

    #[test]
    fn plans_are_exact_partitions(n in 2usize..60, fraction in 0.01f64..0.99, seed in any::<u64>()) {
        let counts = skewed_counts(&mut common::rng(seed), n, 4);
        let items = split_items(&counts);
        let plan = propose_split(&items, fraction, seed, 3).unwrap();
        prop_assert_eq!(plan.val_records.len(), target_val_size(n, fraction));
        prop_assert_eq!(plan.val_records.len() + plan.train_records.len(), n);
        prop_assert!(plan.val_records.is_disjoint(&plan.train_records));
        for item in &items {
            prop_assert!(plan.val_records.contains(&item.key) || plan.train_records.contains(&item.key));
        }
    }

    #[test]
    fn divergence_is_symmetric(
        a in prop::collection::vec(0u64..1000, 6),
        b in prop::collection::vec(0u64..1000, 6),
        scale in 1u64..5,
    ) {
        prop_assume!(a.iter().sum::<u64>() > 0 && b.iter().sum::<u64>() > 0);
        let ha = ClassHistogram::from_counts(a.iter().enumerate().map(|(i, &n)| (i as u8, n)));
        let hb = ClassHistogram::from_counts(b.iter().enumerate().map(|(i, &n)| (i as u8, n)));
        let d = split_divergence(&ha, &hb).unwrap();
        prop_assert_eq!(d, split_divergence(&hb, &ha).unwrap());
        prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
        prop_assert!(common::close(d, common::oracle_divergence(&a, &b), 1e-12) || d == 0.0);
        // zero iff the normalized distributions agree
        let scaled = ClassHistogram::from_counts(a.iter().enumerate().map(|(i, &n)| (i as u8, n * scale)));
        prop_assert!(split_divergence(&ha, &scaled).unwrap() < 1e-12);
    }
}
