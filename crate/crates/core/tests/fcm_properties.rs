use ndarray::Array2;
use proptest::prelude::*;

use trajkd_core::fcm::*;

fn matrix(max_rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (4..max_rows).prop_flat_map(move |n| {
        prop::collection::vec(-50.0..50.0f64, n * cols)
            .prop_map(move |v| Array2::from_shape_vec((n, cols), v).unwrap())
    })
}

fn config(c: usize, seed: u64) -> FcmConfig {
    FcmConfig::new(c, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn memberships_are_stochastic(x in matrix(40, 3), c in 1usize..4, seed in any::<u64>()) {
        let p = fcm_fit(x.view(), &config(c, seed)).unwrap();
        prop_assert_eq!(p.memberships.dim(), (x.nrows(), c));
        for row in p.memberships.rows() {
            prop_assert!(row.iter().all(|&u| (0.0..=1.0).contains(&u)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn objective_never_increases(x in matrix(40, 2), c in 2usize..4, seed in any::<u64>()) {
        let p = fcm_fit(x.view(), &config(c, seed)).unwrap();
        for w in p.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        let recomputed = objective(x.view(), &p.memberships, &p.centers, p_fuzzifier());
        prop_assert!((recomputed - p.objective()).abs() <= 1e-6 * (1.0 + recomputed.abs()));
    }

    #[test]
    fn centers_stay_in_bounding_box(x in matrix(40, 3), c in 1usize..5, seed in any::<u64>()) {
        prop_assume!(c <= x.nrows());
        let p = fcm_fit(x.view(), &config(c, seed)).unwrap();
        for j in 0..x.ncols() {
            let col = x.column(j);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in p.centers.column(j) {
                prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn fit_is_deterministic(x in matrix(30, 2), seed in any::<u64>()) {
        let a = fcm_fit(x.view(), &config(3, seed)).unwrap();
        let b = fcm_fit(x.view(), &config(3, seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn centers_are_lexicographically_ordered(x in matrix(30, 2), seed in any::<u64>()) {
        let p = fcm_fit(x.view(), &config(3, seed)).unwrap();
        let rows: Vec<Vec<f64>> = p.centers.rows().into_iter().map(|r| r.to_vec()).collect();
        for w in rows.windows(2) {
            prop_assert!(w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Greater));
        }
    }

    #[test]
    fn uniform_scaling_keeps_labels(x in matrix(30, 2), s in 0.1..20.0f64, seed in any::<u64>()) {
        let a = fcm_fit(x.view(), &config(2, seed)).unwrap();
        let scaled = &x * s;
        let b = fcm_fit(scaled.view(), &config(2, seed)).unwrap();
        // ties in argmax are the only place scaling may flip a label
        let margin = |p: &FuzzyPartition, i: usize| (p.memberships[[i, 0]] - p.memberships[[i, 1]]).abs();
        let la = hard_assign(&a);
        let lb = hard_assign(&b);
        for i in 0..x.nrows() {
            if margin(&a, i) > 1e-6 {
                prop_assert_eq!(la[i], lb[i]);
            }
        }
    }
}

fn p_fuzzifier() -> f64 {
    FcmConfig::new(1, 0).fuzzifier
}

#[test]
fn separated_blobs_are_recovered() {
    let mut rows = Vec::new();
    for i in 0..30 {
        let t = i as f64 * 0.01;
        rows.extend([t, -t]);
        rows.extend([100.0 + t, 100.0 - t]);
    }
    let x = Array2::from_shape_vec((60, 2), rows).unwrap();
    let p = fcm_fit(x.view(), &FcmConfig::new(2, 3)).unwrap();
    let labels = hard_assign(&p);
    for i in 0..30 {
        assert_eq!(labels[2 * i], 0);
        assert_eq!(labels[2 * i + 1], 1);
    }
    assert!(p.converged);
}

#[test]
fn more_clusters_than_rows_is_rejected() {
    let x = Array2::<f64>::zeros((2, 2));
    assert!(matches!(
        fcm_fit(x.view(), &FcmConfig::new(3, 0)),
        Err(FcmError::TooFewRows { clusters: 3, rows: 2 })
    ));
}
