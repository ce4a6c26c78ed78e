use std::sync::Arc;

use proptest::prelude::*;

use glcert::attack::{direct_attack, fgsm_l2, random_perturbation, AttackKind, AttackScope, AttackSpec, DirectionSign};
use glcert::certify::{certified_bounds, margin_robust_set, CertInputs, Constants};
use glcert::classify::{accuracy, gl_classify, knn_classify, Prediction};
use glcert::config::{ExperimentConfig, Mode};
use glcert::data::{class_of, Dataset};
use glcert::defend::{min_cross_class_distance, robust_prune};
use glcert::graph::{build_epsilon_graph, build_knn_graph, Graph, KernelKind, KernelSpec, KnnWeights};
use glcert::models::SurrogateModel;
use glcert::record::{rows_from_csv, rows_to_csv, RunRecord};
use glcert::solve::{check_maximum_principle, dense_oracle_solve, harmonic_extend, SolverConfig};
use glcert::stats::{bootstrap_mean_lower, mean, spearman};
use glcert::GlError;

/// Points in [0, 1]^d with binary labels and a mask holding at least one
/// labeled and one unlabeled point.
fn dataset(max_n: usize) -> impl Strategy<Value = Dataset> {
    (3..=max_n, 1..=3usize).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(0.0..1.0f64, n * d),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(pts, labels, mut mask)| {
                mask[0] = true;
                mask[n - 1] = false;
                let labels = labels.into_iter().map(|b| f64::from(u8::from(b))).collect();
                Dataset::new("prop", d, pts, labels, mask).unwrap()
            })
    })
}

fn dense_laplacian_apply(g: &Graph, u: &[f64]) -> Vec<f64> {
    let n = g.n();
    let mut w = vec![vec![0.0; n]; n];
    for (i, j, x) in g.edges() {
        w[i][j] = x;
        w[j][i] = x;
    }
    (0..n).map(|i| (0..n).map(|j| w[i][j] * (u[i] - u[j])).sum()).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn epsilon_graphs_are_symmetric_with_exact_degrees(ds in dataset(60), eps in 0.05..0.8f64, bump in any::<bool>()) {
        let kind = if bump { KernelKind::LipschitzBump } else { KernelKind::Indicator };
        let g = build_epsilon_graph(&ds, KernelSpec::new(kind, eps, ds.dim())).unwrap();
        prop_assert_eq!(g.max_asymmetry(), 0.0);
        prop_assert!(g.edges().iter().all(|e| e.2 > 0.0));
        prop_assert_eq!(g.recomputed_degrees(), g.degrees().to_vec());
        let support = kind.support().unwrap() * eps;
        for (i, j, _) in g.edges() {
            prop_assert!(sq(ds.point(i), ds.point(j)) <= support + 1e-12);
        }
    }

    #[test]
    fn knn_graphs_are_symmetric(ds in dataset(60), k in 1..6usize, uniform in any::<bool>()) {
        let k = k.min(ds.len() - 1);
        let weights = if uniform { KnnWeights::UniformNk } else { KnnWeights::self_tuning() };
        let g = build_knn_graph(&ds, k, weights).unwrap();
        prop_assert_eq!(g.max_asymmetry(), 0.0);
        prop_assert_eq!(g.recomputed_degrees(), g.degrees().to_vec());
        prop_assert!((0..g.n()).all(|i| g.row_len(i) >= k.min(1)));
        if uniform {
            let w = ds.len() as f64 / k as f64;
            prop_assert!(g.edges().iter().all(|e| e.2 == w));
        }
    }

    #[test]
    fn laplacian_matches_dense_and_kills_constants(ds in dataset(40), c in -5.0..5.0f64, seed in any::<u64>()) {
        let g = build_knn_graph(&ds, 2.min(ds.len() - 1), KnnWeights::self_tuning()).unwrap();
        let lc = g.laplacian_apply(&vec![c; g.n()]).unwrap();
        prop_assert!(lc.iter().all(|v| v.abs() <= 1e-12 * c.abs().max(1.0) * g.degrees().iter().fold(1.0, |a, &b| f64::max(a, b))));
        let u: Vec<f64> = (0..g.n()).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64) / 1000.0).collect();
        let fast = g.laplacian_apply(&u).unwrap();
        let slow = dense_laplacian_apply(&g, &u);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn harmonic_extension_matches_dense_oracle(ds in dataset(80), k in 2..8usize) {
        let g = build_knn_graph(&ds, k.min(ds.len() - 1), KnnWeights::self_tuning()).unwrap();
        match harmonic_extend(&g, &ds, &SolverConfig::default()) {
            Ok(sol) => {
                let dense = dense_oracle_solve(&g, &ds).unwrap();
                for (a, b) in sol.u.iter().zip(&dense.u) {
                    prop_assert!((a - b).abs() <= 1e-8);
                }
                prop_assert!(check_maximum_principle(&sol, &ds).holds(1e-8));
                for i in ds.labeled_indices() {
                    prop_assert_eq!(sol.u[i], ds.labels()[i]);
                }
                let pred = gl_classify(&sol);
                for (c, u) in pred.classes.iter().zip(&sol.u) {
                    prop_assert_eq!(*c == 1, *u >= 0.5);
                }
            }
            Err(GlError::UnsolvableComponent { .. }) => prop_assert!(!g.is_connected()),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn direct_attack_moves_exactly_r(ds in dataset(50), r in 0.0..0.5f64, seed in any::<u64>(), toward in any::<bool>(), all in any::<bool>()) {
        let scope = if all { AttackScope::All } else { AttackScope::Unlabeled };
        let sign = if toward { DirectionSign::TowardOpponent } else { DirectionSign::AwayFromOpponent };
        let reference = ds.all_labeled();
        prop_assume!(reference.classes().contains(&0) && reference.classes().contains(&1));
        let spec = AttackSpec::direct(r, seed).with_sign(sign).with_scope(scope);
        let a = direct_attack(&ds, &reference, &spec).unwrap();
        let b = direct_attack(&ds, &reference, &spec).unwrap();
        prop_assert_eq!(a.perturbed.points(), b.perturbed.points());
        prop_assert!(a.verify().is_ok());
        prop_assert_eq!(a.perturbed.labels(), ds.labels());
        prop_assert_eq!(a.perturbed.labeled_mask(), ds.labeled_mask());
        for (i, &s) in a.per_point_shift.iter().enumerate() {
            if all || !ds.is_labeled(i) {
                prop_assert!((s - r).abs() <= 1e-12 * r.max(1.0));
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn fgsm_shift_is_zero_or_r(ds in dataset(50), r in 0.0..0.5f64, w0 in -2.0..2.0f64, w1 in -2.0..2.0f64, b in -1.0..1.0f64) {
        let mut w = vec![w0, w1, 0.5];
        w.truncate(ds.dim());
        let m = Arc::new(SurrogateModel::logistic(w.clone(), b));
        let spec = AttackSpec::gradient(AttackKind::BbLr, r, m, 1);
        let p = fgsm_l2(&ds, &spec).unwrap();
        prop_assert!(p.verify().is_ok());
        let zero_grad = w.iter().all(|&v| v == 0.0);
        for (i, &s) in p.per_point_shift.iter().enumerate() {
            if ds.is_labeled(i) || zero_grad {
                prop_assert_eq!(s, 0.0);
            } else {
                prop_assert!((s - r).abs() <= 1e-12 * r.max(1.0) || s == 0.0);
            }
        }
    }

    #[test]
    fn random_perturbation_is_exact(ds in dataset(40), r in 0.0..1.0f64, seed in any::<u64>()) {
        let p = random_perturbation(&ds, r, seed, AttackScope::All).unwrap();
        prop_assert!(p.per_point_shift.iter().all(|&s| (s - r).abs() <= 1e-12 * r.max(1.0)));
        prop_assert_eq!(p.perturbed.labels(), ds.labels());
    }

    #[test]
    fn pruning_is_a_separated(ds in dataset(80), a in 0.01..0.5f64) {
        match robust_prune(&ds, a) {
            Ok(p) => {
                prop_assert!(min_cross_class_distance(&p) > a);
                let input = ds.labeled_part().unwrap().classes();
                if input.contains(&0) && input.contains(&1) {
                    prop_assert!(p.classes().contains(&0) && p.classes().contains(&1));
                }
                prop_assert!(p.len() <= ds.labeled_count());
            }
            Err(GlError::EmptyPrune { largest_feasible }) => {
                prop_assert!(largest_feasible < a);
            }
            Err(e) => {
                // Only a one-class labeled part may fail otherwise.
                let labeled = ds.labeled_part().unwrap();
                prop_assert!(!(labeled.classes().contains(&0) && labeled.classes().contains(&1)), "unexpected error {e}");
            }
        }
    }

    #[test]
    fn certified_quantities_scale(n in 100..100_000usize, frac in 0.05..1.0f64, eps in 0.01..0.2f64, c in 0.01..2.0f64, big in 0.1..3.0f64) {
        let m = ((frac * n as f64) as usize).max(1);
        let inp = CertInputs::new(n, m, 2, eps, Constants::new(c, big));
        prop_assume!(inp.beta() >= eps * eps);
        let b = certified_bounds(&inp).unwrap();
        let b2 = certified_bounds(&CertInputs::new(n, m, 2, eps, Constants::new(2.0 * c, 2.0 * big))).unwrap();
        prop_assert!((b2.r_max - 2.0 * b.r_max).abs() <= 1e-12 * b.r_max.max(1e-300));
        prop_assert!((b2.delta - 2.0 * b.delta).abs() <= 1e-12 * b.delta.max(1e-300));
        prop_assert!(b2.k_min >= b.k_min);
        prop_assert!(b.delta >= 0.0 && b.r_max >= 0.0);
        prop_assert!(b.prob_proxy >= 0.0 && b.prob_proxy <= n as f64);
        // More labels at the same N never shrink the certified budget.
        if m < n {
            let more = certified_bounds(&CertInputs::new(n, m + 1, 2, eps, Constants::new(c, big))).unwrap();
            prop_assert!(more.r_max >= b.r_max);
            prop_assert!(more.k_min <= b.k_min);
        }
    }

    #[test]
    fn margin_set_is_exact_and_nested(u in prop::collection::vec(0.0..1.0f64, 0..100), d1 in 0.0..0.3f64, d2 in 0.0..0.3f64) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let big = margin_robust_set(&u, lo);
        let small = margin_robust_set(&u, hi);
        for i in 0..u.len() {
            prop_assert_eq!(big.contains(&i), (u[i] - 0.5).abs() > 2.0 * lo);
        }
        prop_assert!(small.iter().all(|i| big.contains(i)));
    }

    #[test]
    fn accuracy_of_flipped_prediction_is_complement(scores in prop::collection::vec(0.0..1.0f64, 1..100), truth_bits in prop::collection::vec(any::<bool>(), 100)) {
        let truth: Vec<f64> = truth_bits[..scores.len()].iter().map(|&b| f64::from(u8::from(b))).collect();
        let p = Prediction::from_scores(scores.clone());
        let flipped = Prediction { classes: p.classes.iter().map(|c| 1 - c).collect(), scores };
        let a = accuracy(&p, &truth, None).unwrap();
        let b = accuracy(&flipped, &truth, None).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn knn_with_every_labeled_point_votes_the_majority(ds in dataset(40), q in prop::collection::vec(0.0..1.0f64, 3)) {
        let labeled = ds.labeled_part().unwrap();
        let k = labeled.len();
        let ones = labeled.classes().iter().filter(|&&c| c == 1).count();
        let d = ds.dim();
        let pred = knn_classify(&ds, &q[..d], k).unwrap();
        prop_assert_eq!(pred.scores[0], ones as f64 / k as f64);
        prop_assert_eq!(pred.classes[0], u8::from(2 * ones >= k));
    }

    #[test]
    fn records_round_trip(acc in 0.0..1.0f64, r in 0.0..10.0f64, seed in any::<u64>(), dev in prop::option::of(0.0..1.0f64), it in prop::option::of(0..100_000usize)) {
        let rec = RunRecord {
            config_hash: "0123456789abcdef".into(),
            dataset: "halfmoon".into(),
            labeled: 400,
            seed,
            classifier: "ATGL-ALL".into(),
            attack: "bb_kernel".into(),
            r,
            accuracy: acc,
            u_deviation: dev,
            solver_iterations: it,
            wall_time_s: 0.0,
            peak_bytes: 0,
        };
        let text = rows_to_csv(std::slice::from_ref(&rec)).unwrap();
        let back: Vec<RunRecord> = rows_from_csv(&text).unwrap();
        prop_assert_eq!(back, vec![rec]);
    }

    #[test]
    fn dataset_csv_round_trips(ds in dataset(30)) {
        let back = Dataset::parse_csv(&ds.to_csv_string(), true, "prop").unwrap();
        prop_assert_eq!(back.points(), ds.points());
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.labeled_mask(), ds.labeled_mask());
    }

    #[test]
    fn edge_lists_round_trip(ds in dataset(40), eps in 0.1..0.6f64) {
        let g = build_epsilon_graph(&ds, KernelSpec::new(KernelKind::LipschitzBump, eps, ds.dim())).unwrap();
        let back = Graph::from_edge_list(&g.to_edge_list()).unwrap();
        prop_assert_eq!(back.edges(), g.edges());
        prop_assert_eq!(back.degrees(), g.degrees());
    }

    #[test]
    fn config_round_trip_keeps_hash(seeds in prop::collection::vec(any::<u32>(), 1..10), k in 1..30usize) {
        let mut cfg = ExperimentConfig::new(Mode::RobustCurve, seeds.into_iter().map(u64::from).collect());
        cfg.curves.knn_k = k;
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn rank_statistics_are_bounded(x in prop::collection::vec(-10.0..10.0f64, 2..40), seed in any::<u64>()) {
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        if let Some(s) = spearman(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
        let sorted: Vec<f64> = (0..x.len()).map(|i| i as f64).collect();
        prop_assert!((spearman(&sorted, &sorted).unwrap() - 1.0).abs() <= 1e-12);
        let lo = bootstrap_mean_lower(&x, 0.95, 500, seed);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= hi + 1e-12 && lo >= x.iter().copied().fold(f64::INFINITY, f64::min) - 1e-12);
        prop_assert!(mean(&x).is_finite());
    }
}

#[test]
fn class_threshold_is_half() {
    assert_eq!(class_of(0.5), 1);
    assert_eq!(class_of(0.5 - 1e-15), 0);
}
