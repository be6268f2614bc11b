//! Invariants checked over randomly generated inputs.

use lgc::edge_dist::{AdjacencySample, EdgeDistribution};
use lgc::harness::stats::welch_t_test;
use lgc::harness::{calibration_metrics, two_atom_mmd2, two_atom_point_mae};
use lgc::kernels::KernelSpec;
use lgc::losses::mmd2_unbiased;
use lgc::poly_gnn::{hop_matrices, PolyGnn};
use ndarray::Array2;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn square(n: usize, values: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((n, n), values).expect("n * n values")
}

fn theta_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..7).prop_flat_map(|n| (Just(n), vec(0.0..=1.0f64, n * n)))
}

fn edges_strategy() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (1usize..9).prop_flat_map(|n| (Just(n), vec(any::<bool>(), n * n)))
}

fn sample_from(n: usize, bits: &[bool]) -> AdjacencySample {
    let mut a = AdjacencySample::empty(n);
    for (k, &on) in bits.iter().enumerate() {
        a.set(k / n, k % n, on);
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trainable_entries_stay_inside_the_clamp((n, values) in theta_strategy(), step in -2.0..2.0f64) {
        let mut dist = EdgeDistribution::trainable(square(n, values)).unwrap();
        dist.update(|t| t.iter_mut().for_each(|v| *v += step));
        let eps = dist.epsilon();
        prop_assert!(dist.theta().iter().all(|&t| (eps..=1.0 - eps).contains(&t)));
    }

    #[test]
    fn samples_respect_deterministic_entries((n, values) in theta_strategy(), seed in any::<u64>()) {
        let theta = square(n, values.iter().map(|v| v.round()).collect());
        let dist = EdgeDistribution::fixed(theta.clone()).unwrap();
        let a = dist.sample(&mut ChaCha8Rng::seed_from_u64(seed));
        for ((i, j), &t) in theta.indexed_iter() {
            prop_assert_eq!(a.get(i, j), t == 1.0);
        }
        prop_assert_eq!(dist.log_likelihood(&a).unwrap(), 0.0);
    }

    #[test]
    fn log_likelihood_is_a_log_probability((n, values) in theta_strategy(), seed in any::<u64>()) {
        let dist = EdgeDistribution::trainable(square(n, values)).unwrap();
        let a = dist.sample(&mut ChaCha8Rng::seed_from_u64(seed));
        let ll = dist.log_likelihood(&a).unwrap();
        prop_assert!(ll <= 0.0 && ll.is_finite());
    }

    #[test]
    fn frozen_entries_get_no_score((n, values) in theta_strategy(), seed in any::<u64>(), k in any::<prop::sample::Index>()) {
        let mut dist = EdgeDistribution::trainable(square(n, values)).unwrap();
        let e = k.index(n * n);
        dist.freeze(e / n, e % n, 0.25).unwrap();
        let a = dist.sample(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(dist.score_gradient(&a)[(e / n, e % n)], 0.0);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself((n, values) in theta_strategy(), p in 0.01..0.99f64) {
        let dist = EdgeDistribution::trainable(square(n, values)).unwrap();
        let prior = EdgeDistribution::uniform(n, p).unwrap();
        prop_assert!(dist.kl_to(&prior).unwrap() >= -1e-12);
        prop_assert!(dist.kl_to(&dist).unwrap().abs() < 1e-12);
    }

    #[test]
    fn distribution_json_round_trips((n, values) in theta_strategy()) {
        let dist = EdgeDistribution::trainable(square(n, values)).unwrap();
        let back: EdgeDistribution = serde_json::from_str(&serde_json::to_string(&dist).unwrap()).unwrap();
        prop_assert_eq!(back, dist);
    }

    #[test]
    fn adding_edges_never_removes_reachability((n, bits) in edges_strategy(), extra in any::<prop::sample::Index>(), hops in 1usize..4) {
        let a = sample_from(n, &bits);
        let mut b = a.clone();
        let e = extra.index(n * n);
        b.set(e / n, e % n, true);
        for (ha, hb) in hop_matrices(&a, hops).iter().zip(hop_matrices(&b, hops).iter()) {
            for (i, j) in ha.edges() {
                prop_assert!(hb.get(i, j));
            }
        }
    }

    #[test]
    fn first_hop_is_the_adjacency((n, bits) in edges_strategy()) {
        let a = sample_from(n, &bits);
        prop_assert_eq!(&hop_matrices(&a, 1)[0], &a);
    }

    #[test]
    fn outputs_lie_in_the_open_unit_interval((n, bits) in edges_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = PolyGnn::random(2, 3, 2, -1.0, 1.0, &mut rng).unwrap();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 3 + j) as f64).sin() * 2.0);
        let y = model.forward(&x, &sample_from(n, &bits)).unwrap();
        prop_assert!(y.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn rational_quadratic_is_a_bounded_symmetric_similarity(
        a in vec(-3.0..3.0f64, 1..5), shift in vec(-3.0..3.0f64, 5), sigma in 0.01..3.0f64, alpha in 0.1..4.0f64,
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let k = KernelSpec::rational_quadratic(sigma, alpha).unwrap();
        let kab = k.eval(&a, &b).unwrap();
        prop_assert!(kab > 0.0 && kab <= 1.0);
        prop_assert_eq!(kab, k.eval(&b, &a).unwrap());
        prop_assert_eq!(k.eval(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn unbiased_mmd_is_symmetric(
        xs in vec(vec(-1.0..1.0f64, 2), 2..6), ys in vec(vec(-1.0..1.0f64, 2), 2..6),
    ) {
        let k = KernelSpec::rational_quadratic(0.5, 1.0).unwrap();
        let ab = mmd2_unbiased(&k, &xs, &ys);
        let ba = mmd2_unbiased(&k, &ys, &xs);
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn calibration_mae_is_bounded_by_max((n, a) in theta_strategy(), seed in any::<u64>()) {
        let b = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng;
            square(n, (0..n * n).map(|_| rng.gen::<f64>()).collect())
        };
        let c = calibration_metrics(&square(n, a.clone()), &b).unwrap();
        prop_assert!(c.mae <= c.max_ae + 1e-15);
        prop_assert_eq!(calibration_metrics(&square(n, a.clone()), &square(n, a)).unwrap().max_ae, 0.0);
    }

    #[test]
    fn welch_is_symmetric_and_a_probability(a in vec(-5.0..5.0f64, 2..12), b in vec(-5.0..5.0f64, 2..12)) {
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab.p));
        prop_assert!((ab.p - ba.p).abs() < 1e-9);
        prop_assert!((ab.t + ba.t).abs() < 1e-9);
    }

    #[test]
    fn point_mae_cannot_see_theta_above_one_half(t1 in 0.51..0.99f64, t2 in 0.51..0.99f64, f1 in 0.1..2.0f64) {
        prop_assert!((two_atom_point_mae(t1, 0.75, 0.0, f1) - two_atom_point_mae(t2, 0.75, 0.0, f1)).abs() < 1e-12);
    }

    #[test]
    fn full_mmd_vanishes_only_at_the_truth(t in 0.01..0.99f64, ts in 0.01..0.99f64) {
        let k = KernelSpec::default();
        let v = two_atom_mmd2(t, ts, 0.0, 1.0, &k);
        prop_assert!(v >= -1e-12);
        if (t - ts).abs() > 1e-3 {
            prop_assert!(v > 0.0);
        }
    }
}
