mod common;

use forgetkit::autodiff::Graph;
use forgetkit::data::{build_scenario, sample_batch, Dataset, ScenarioKind, ScenarioSpec, Split};
use forgetkit::lora::{inject_lora, merge_task, zero_ratio_of_norms, LoraConfig};
use forgetkit::losses::{forgetting_loss, LossBreakdown, LossConfig};
use forgetkit::metrics::{accuracy_of, h_mean};
use forgetkit::model::MicroTransformer;
use forgetkit::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn h_mean_bounds_and_symmetry(r in 0.0..100.0f64, drop in 0.0..100.0f64) {
        let h = h_mean(r, drop, 0.0);
        prop_assert!(h <= 2.0 * r.min(drop) + 1e-9);
        prop_assert!(h <= r.max(drop) + 1e-9);
        prop_assert!((h - h_mean(drop, r, 0.0)).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&h));
    }

    #[test]
    fn zero_ratio_monotone_in_tau(norms in prop::collection::vec(0.0..5.0f64, 1..20), t1 in 1e-6..3.0f64, t2 in 1e-6..3.0f64) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(zero_ratio_of_norms(&norms, lo) <= zero_ratio_of_norms(&norms, hi));
        let max = norms.iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(zero_ratio_of_norms(&norms, max + 1.0), 1.0);
    }

    #[test]
    fn partition_accuracy_is_weighted_mean(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let total = accuracy_of(&pred, &labels, None).unwrap();
        let mut weighted = 0.0;
        for c in 0..4 {
            let n = labels.iter().filter(|&&y| y == c).count();
            if n > 0 {
                weighted += accuracy_of(&pred, &labels, Some(&[c])).unwrap() * n as f64;
            }
        }
        prop_assert!((weighted / labels.len() as f64 - total).abs() < 1e-9);
    }

    #[test]
    fn forgetting_loss_within_bound(rows in prop::collection::vec(prop::collection::vec(-20.0..20.0f64, 4), 1..6), bnd in 0.1..10.0f64) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| i % 4).collect();
        let mut g = Graph::new();
        let v = g.variable(Tensor::from_rows(&rows).unwrap());
        let f = forgetting_loss(&mut g, v, &labels, bnd).unwrap();
        let val = g.value(f).item();
        prop_assert!((0.0..=bnd).contains(&val));
    }

    #[test]
    fn breakdown_components_sum_to_total(r in 0.0..5.0f64, f in 0.0..5.0f64, pr in 0.0..5.0f64, pf in 0.0..5.0f64, s in 0.0..50.0f64,
                                          alpha in 0.0..1.0f64, beta in 0.0..1.0f64, gamma in 0.0..1.0f64, pro in any::<bool>()) {
        let cfg = LossConfig { alpha, beta, gamma, prototypes: pro, ..LossConfig::default() };
        let b = LossBreakdown::from_terms(r, f, pr, pf, s, &cfg);
        let sum: f64 = b.components(&cfg).iter().sum();
        prop_assert!((sum - b.total).abs() <= 1e-12 * b.total.abs().max(1.0));
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), size in 1usize..20) {
        let data = Dataset::new((0..40).map(|v| v as f64).collect(), (0..10).map(|i| i % 3).collect(), 4, 3, Split::Train).unwrap();
        let a = sample_batch(&data, size, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample_batch(&data, size, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scenarios_keep_forgotten_classes_out_of_rehearsal(seed in any::<u64>(), split in 1usize..4, rho in 0.05..0.5f64) {
        let (tr, _) = common::small_data(seed % 7);
        let spec = ScenarioSpec {
            kind: ScenarioKind::Continual,
            tasks: (0..split).map(|t| vec![t]).collect(),
            data_ratio: rho,
            shots: None,
            missing: Vec::new(),
        };
        let sc = build_scenario(&tr, &spec, seed).unwrap();
        let mut union: Vec<usize> = sc.all_forgotten();
        for (t, task) in sc.tasks.iter().enumerate() {
            let counts = task.retain.class_counts();
            for earlier in &sc.tasks[..=t] {
                for &c in &earlier.forget_classes {
                    prop_assert_eq!(counts[c], 0);
                }
            }
        }
        union.extend(sc.final_remaining());
        union.sort_unstable();
        prop_assert_eq!(union, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn adapters_preserve_then_merge_preserves(seed in any::<u64>(), rank in 1usize..4) {
        let mut m = MicroTransformer::new(common::small_config(8, 6), seed).unwrap();
        let x = common::random_inputs(16, 8, seed ^ 1);
        let before = m.logits(&x).unwrap();
        inject_lora(&mut m, &LoraConfig { rank, ..LoraConfig::default() }, 1, seed).unwrap();
        prop_assert_eq!(m.logits(&x).unwrap(), before);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in m.params().trainable_ids() {
            for v in m.params_mut().value_mut(id).data_mut() {
                *v += rand::Rng::random_range(&mut rng, -0.3..0.3);
            }
        }
        let adapted = m.logits(&x).unwrap();
        merge_task(&mut m, 1).unwrap();
        let merged = m.logits(&x).unwrap();
        let diff = adapted.data().iter().zip(merged.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-9, "merge moved logits by {diff}");
    }
}
