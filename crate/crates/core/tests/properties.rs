use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtz_core::hessian::{layer_hessian, CalibrationSet};
use mtz_core::linalg::{spd_solve, Matrix, Permutation, SpdMatrix};
use mtz_core::model::arch::Architecture;
use mtz_core::model::{Network, Shape};
use mtz_core::zipper::{functional_difference, optimal_merge, select_pairs, zip_models, MatchingPolicy, MergePlan, PairSolver, ShareTarget, TaskInputs};
use mtz_core::TaskId;

fn spd(n: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
    let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut m = a.matmul_tr(&a).unwrap();
    for k in 0..n {
        m.set(k, k, m.get(k, k) + 0.1);
    }
    SpdMatrix::from_matrix(m).unwrap()
}

fn vector(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn mlp(hidden: &[usize], input: usize, task: &str, rng: &mut ChaCha8Rng) -> Network {
    Architecture::mlp(hidden).build(TaskId::new(task), Shape::Flat(input), 3, rng).unwrap()
}

fn calibration(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> CalibrationSet {
    CalibrationSet::new(Matrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0)), TaskId::new("c")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spd_solve_residual_is_small(seed in any::<u64>(), n in 1usize..12, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spd(n, &mut rng);
        let b = Matrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        let x = spd_solve(&a, &b).unwrap();
        let r = a.to_matrix().matmul(&x).unwrap();
        prop_assert!(r.max_abs_diff(&b) <= 1e-10 * (1.0 + b.frobenius_norm()));
    }

    #[test]
    fn outer_product_sum_ignores_order(seed in any::<u64>(), n in 1usize..8, count in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..count).map(|_| vector(n, &mut rng)).collect();
        let perm = Permutation::random(count, &mut rng);
        let mut forward = SpdMatrix::zeros(n);
        let mut shuffled = SpdMatrix::zeros(n);
        for x in &xs {
            forward.accumulate_outer(x).unwrap();
        }
        for x in perm.apply(&xs).unwrap() {
            shuffled.accumulate_outer(&x).unwrap();
        }
        let scale = forward.to_matrix().frobenius_norm().max(1e-300);
        prop_assert!(forward.to_matrix().max_abs_diff(&shuffled.to_matrix()) <= 1e-10 * scale);
    }

    #[test]
    fn permutation_inverse_round_trips(seed in any::<u64>(), n in 0usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Permutation::random(n, &mut rng);
        let items: Vec<usize> = (0..n).collect();
        prop_assert_eq!(p.inverse().apply(&p.apply(&items).unwrap()).unwrap(), items);
        prop_assert!(p.compose(&p.inverse()).is_identity());
    }

    #[test]
    fn layer_hessians_are_psd_and_ignore_duplicated_samples(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = mlp(&[6, 4], 5, "t", &mut rng);
        let calib = calibration(n, 5, &mut rng);
        let doubled = Matrix::from_fn(2 * n, 5, |r, c| calib.inputs().get(r % n, c));
        let doubled = CalibrationSet::new(doubled, TaskId::new("c")).unwrap();
        for l in 1..net.depth() {
            let h = layer_hessian(&net, l, &calib, 0.5).unwrap().matrix();
            let d = layer_hessian(&net, l, &doubled, 0.5).unwrap().matrix();
            prop_assert!(h.to_matrix().max_abs_diff(&d.to_matrix()) <= 1e-12 * (1.0 + h.trace()));
            for _ in 0..200 {
                let v = vector(h.dim(), &mut rng);
                prop_assert!(h.quadratic_form(&v).unwrap() >= -1e-10);
            }
        }
    }

    #[test]
    fn merge_is_nonnegative_symmetric_and_beats_feasible_moves(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ha = spd(n, &mut rng);
        let hb = spd(n, &mut rng);
        let wa = vector(n, &mut rng);
        let wb = vector(n, &mut rng);
        let m = optimal_merge(&wa, &wb, &ha, &hb).unwrap();
        prop_assert!(m.difference >= -1e-12);
        let swapped = optimal_merge(&wb, &wa, &hb, &ha).unwrap();
        prop_assert!((swapped.difference - m.difference).abs() <= 1e-10 * (1.0 + m.difference));
        for k in 0..n {
            prop_assert!((swapped.delta_a[k] - m.delta_b[k]).abs() <= 1e-8);
            prop_assert!((swapped.delta_b[k] - m.delta_a[k]).abs() <= 1e-8);
        }
        // Any common target w gives a feasible pair of updates.
        for _ in 0..1000 {
            let w: Vec<f64> = m.merged.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let da: Vec<f64> = w.iter().zip(&wa).map(|(t, a)| t - a).collect();
            let db: Vec<f64> = w.iter().zip(&wb).map(|(t, b)| t - b).collect();
            let cost = 0.5 * (ha.quadratic_form(&da).unwrap() + hb.quadratic_form(&db).unwrap());
            prop_assert!(cost >= m.difference - 1e-10 * (1.0 + cost));
        }
    }

    #[test]
    fn scaling_both_hessians_keeps_the_matching(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let ha = spd(n, &mut rng);
        let hb = spd(n, &mut rng);
        let wa = Matrix::from_fn(n, 6, |_, _| rng.random_range(-1.0..1.0));
        let wb = Matrix::from_fn(n, 5, |_, _| rng.random_range(-1.0..1.0));
        let base = PairSolver::new(&ha, &hb).unwrap().score_all(&wa, &wb).unwrap();
        let scaled = PairSolver::new(&ha.scaled(scale), &hb.scaled(scale)).unwrap().score_all(&wa, &wb).unwrap();
        for (a, b) in base.as_slice().iter().zip(scaled.as_slice()) {
            prop_assert!((b - scale * a).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let d = functional_difference(&wa.column(0), &wb.column(0), &ha, &hb).unwrap();
        prop_assert!((d - base.get(0, 0)).abs() <= 1e-10 * (1.0 + d));
        for policy in [MatchingPolicy::Greedy, MatchingPolicy::Exhaustive] {
            let target = ShareTarget::Count(3);
            prop_assert_eq!(
                select_pairs(&base, target, policy, 1).unwrap(),
                select_pairs(&scaled, target, policy, 1).unwrap()
            );
        }
    }

    #[test]
    fn parameters_saved_match_shared_counts(seed in any::<u64>(), s1 in 0usize..7, s2 in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = mlp(&[7, 5], 4, "a", &mut rng);
        let b = mlp(&[8, 6], 4, "b", &mut rng);
        let calib = calibration(40, 4, &mut rng);
        let inp = TaskInputs { calibration: Some(&calib), ..Default::default() };
        let plan = MergePlan::new(vec![ShareTarget::Count(s1), ShareTarget::Count(s2)]);
        let (zm, report) = zip_models(&a, &b, [inp, inp], &plan).unwrap();
        let saved = s1 * (4 + 1) + s2 * (s1 + 1);
        prop_assert_eq!(zm.parameter_count(), a.parameter_count() + b.parameter_count() - saved);
        prop_assert_eq!(report.params_after, zm.parameter_count());
        for (l, want) in [(1, s1), (2, s2)] {
            let layer = zm.shared_layer(l, 0, 1).unwrap();
            prop_assert_eq!(layer.shared_count, want);
            prop_assert_eq!(layer.specific_a, a.layers()[l - 1].units() - want);
            prop_assert_eq!(layer.specific_b, b.layers()[l - 1].units() - want);
            prop_assert_eq!(layer.origins.len(), want);
            prop_assert_eq!(layer.shared.cols(), want);
            prop_assert_eq!(layer.hat_a.cols(), layer.specific_a);
            prop_assert_eq!(layer.hat_b.cols(), layer.specific_b);
        }
        // Per-task inference is a pure function of its input.
        let x = vec![0.3, -0.2, 0.9, 0.1];
        prop_assert_eq!(zm.infer_task(&TaskId::new("a"), &x).unwrap(), zm.infer_task(&TaskId::new("a"), &x).unwrap());
    }
}
