use crowdmf::analysis::{
    bimodality_coefficient, difference_in_means, jeffreys_proportion, permutation_test, spearman, weekly_gap_did,
};
use crowdmf::Execution;
use proptest::prelude::*;

fn distinct(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len).prop_filter("needs spread", |v| {
        v.iter().any(|&x| (x - v[0]).abs() > 1e-6)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spearman_ignores_monotone_transforms(x in distinct(3..30), y in distinct(3..30)) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
        let r = spearman(x, y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| (v / 50.0).exp()).collect();
        let ty: Vec<f64> = y.iter().map(|v| 3.0 * v - 7.0).collect();
        prop_assert!((spearman(&tx, &ty).unwrap() - r).abs() <= 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((spearman(y, x).unwrap() - r).abs() <= 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        prop_assert!((spearman(x, &neg).unwrap() + r).abs() <= 1e-12);
    }

    #[test]
    fn jeffreys_stays_inside_the_unit_interval(n in 0u64..10_000, frac in 0.0f64..=1.0) {
        let k = (frac * n as f64).floor() as u64;
        let p = jeffreys_proportion(k, n).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
        let q = jeffreys_proportion(n - k, n).unwrap();
        prop_assert!((p + q - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn bimodality_is_affine_invariant(x in distinct(4..60), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let bc = bimodality_coefficient(&x).unwrap();
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((bimodality_coefficient(&y).unwrap() - bc).abs() <= 1e-9);
        prop_assert!(bc > 0.0 && bc <= 1.0 + 1e-12);
    }

    #[test]
    fn permutation_p_is_a_valid_probability(
        data in prop::collection::vec(-3.0f64..3.0, 6..40),
        seed in any::<u64>(),
    ) {
        let labels: Vec<bool> = (0..data.len()).map(|k| k % 2 == 0).collect();
        let r = permutation_test(difference_in_means, &data, &labels, 100, seed, Execution::Sequential).unwrap();
        prop_assert!(r.p > 0.0 && r.p <= 1.0);
        prop_assert!(r.p >= 1.0 / 101.0);
        let again = permutation_test(difference_in_means, &data, &labels, 100, seed, Execution::Parallel).unwrap();
        prop_assert_eq!(r, again);
    }

    #[test]
    fn gap_did_shifts_with_the_post_period(
        gaps in prop::collection::vec(-1.0f64..1.0, 12..60),
        shift in -2.0f64..2.0,
        level in -3.0f64..3.0,
    ) {
        let post: Vec<bool> = (0..gaps.len()).map(|t| t >= gaps.len() / 2).collect();
        let base = weekly_gap_did(&gaps, &post, None, 2).unwrap();
        let moved: Vec<f64> = gaps.iter().zip(&post).map(|(g, &p)| g + level + if p { shift } else { 0.0 }).collect();
        let est = weekly_gap_did(&moved, &post, None, 2).unwrap();
        prop_assert!((est.beta - base.beta - shift).abs() <= 1e-9);
        prop_assert!((est.se - base.se).abs() <= 1e-9);
    }
}
