use proptest::prelude::*;
use tsb_core::metrics::*;
use tsb_core::training::NormStats;
use tsb_core::Tensor;

fn naive_rmse(p: &[f64], t: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        let e = p[i] - t[i];
        acc += e * e;
    }
    (acc / p.len() as f64).sqrt()
}

fn pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-100.0f64..-20.0, n),
        prop::collection::vec(-100.0f64..-20.0, n),
    )
}

proptest! {
    #[test]
    fn rmse_matches_loop_oracle((p, t) in pair(12)) {
        let pt = Tensor::new(vec![3, 4], p.clone()).unwrap();
        let tt = Tensor::new(vec![3, 4], t.clone()).unwrap();
        let r = rmse(&pt, &tt).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert!((r - naive_rmse(&p, &t)).abs() < 1e-12);
    }

    #[test]
    fn kappa_ignores_monotone_transforms((p, t) in pair(10)) {
        let k = spearman_kappa(&p, &t).unwrap();
        prop_assert!((-1.0..=1.0).contains(&k));
        let warped: Vec<f64> = p.iter().map(|x| (x / 10.0).exp() + 3.0).collect();
        prop_assert!((spearman_kappa(&warped, &t).unwrap() - k).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_covariant((p, t) in pair(8), rot in 1usize..8) {
        let norm = NormStats { mean: -60.0, std: 10.0 };
        let pt = Tensor::new(vec![8], p.clone()).unwrap();
        let tt = Tensor::new(vec![8], t.clone()).unwrap();
        let mut p2 = p.clone();
        let mut t2 = t.clone();
        p2.rotate_left(rot);
        t2.rotate_left(rot);
        let (pr, tr) = (Tensor::new(vec![8], p2).unwrap(), Tensor::new(vec![8], t2).unwrap());
        prop_assert!((rmse(&pt, &tt).unwrap() - rmse(&pr, &tr).unwrap()).abs() < 1e-12);
        prop_assert_eq!(
            accuracy_metrics(&pt, &tt, &norm, -50.0).unwrap(),
            accuracy_metrics(&pr, &tr, &norm, -50.0).unwrap()
        );
    }

    #[test]
    fn availability_survives_shifts_that_cross_nothing(
        p in prop::collection::vec(-100.0f64..-60.0, 6),
        t in prop::collection::vec(-100.0f64..-60.0, 6),
        shift in -5.0f64..5.0,
    ) {
        let norm = NormStats { mean: -80.0, std: 5.0 };
        let pt = Tensor::new(vec![6], p).unwrap();
        let tt = Tensor::new(vec![6], t).unwrap();
        let a = accuracy_metrics(&pt, &tt, &norm, -50.0).unwrap();
        let b = accuracy_metrics(&pt.map(|x| x + shift), &tt.map(|x| x + shift), &norm, -50.0).unwrap();
        prop_assert_eq!(a.availability_accuracy, b.availability_accuracy);
    }
}

#[test]
fn rmse_is_zero_only_for_equal_inputs() {
    let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    assert!(rmse(&a, &a.map(|x| x + 1e-9)).unwrap() > 0.0);
}

#[test]
fn report_serializes_to_json() {
    let t = Tensor::new(vec![1, 3, 2], vec![-70.0, -40.0, -69.0, -41.0, -68.0, -42.0]).unwrap();
    let mut r = MetricsReport::compute(&t, &t, &NormStats { mean: -55.0, std: 14.0 }, -50.0).unwrap();
    r.config_hash = Some("0123".into());
    let js = serde_json::to_value(&r).unwrap();
    assert_eq!(js["rmse_db"], 0.0);
    assert_eq!(js["spearman_kappa_mean"], 1.0);
    assert_eq!(js["config_hash"], "0123");
}
