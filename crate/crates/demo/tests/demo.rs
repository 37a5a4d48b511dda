use hfsgm_demo::{attention, bounds, chains};

#[test]
fn attention_weights_are_normalized_and_order_free() {
    let v = attention(&[0.1, 0.9, -0.4, 0.3, 1.2, -0.7, 0.0, 0.5], 2, 2, 4).unwrap();
    assert_eq!(v.weights.len(), 4);
    for h in 0..2 {
        let s: f64 = v.weights.iter().map(|w| w[h]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(v.reversed_identical);
    assert!(attention(&[1.0, 2.0, 3.0], 2, 1, 0).is_err());
    assert!(attention(&[1.0, 2.0, 3.0], 3, 2, 0).is_err());
}

#[test]
fn chains_track_the_exact_predictive() {
    let v = chains(1.0, 1.0, 0.5, &[0.4, 1.1, 0.8], 4000, 5, 2).unwrap();
    assert_eq!(v.trajectory.len(), 6);
    let n = 4000.0f64;
    assert!((v.mean - v.exact_mean).abs() < 4.0 * (v.exact_var / n).sqrt());
    assert!((v.var - v.exact_var).abs() < 4.0 * v.exact_var * (2.0 / n).sqrt());
    assert!(chains(1.0, 1.0, 1.0, &[], 10, 1, 0).is_err());
}

#[test]
fn bounds_sit_below_the_exact_value() {
    let v = bounds(1.0, 1.0, 1.0, &[0.0, 0.5], 3).unwrap();
    assert!(v.elbo <= v.exact);
    let last = v.estimates.last().unwrap().1;
    assert!((last - v.exact).abs() < 0.05);
    assert!(bounds(-1.0, 1.0, 1.0, &[0.0], 0).is_err());
}
