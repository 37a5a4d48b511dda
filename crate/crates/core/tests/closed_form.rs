//! Hand-derived values for the Gaussian and Bernoulli building blocks and the
//! conjugate oracle.

use hfsgm::distributions::{bernoulli_log_prob, gaussian_log_prob, kl_diag_gaussian, BernoulliImage, DiagGaussian};
use hfsgm::oracle::{exact_log_marginal, exact_predictive, LinearGaussianInstance};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[test]
fn gaussian_kl_by_hand() {
    // KL(N(1, e^0) || N(0, e^{ln 4})) = 0.5 * (ln 4 + (1 + 1) / 4 - 1)
    let q = DiagGaussian::vector(vec![1.0], vec![0.0]).unwrap();
    let p = DiagGaussian::vector(vec![0.0], vec![4f64.ln()]).unwrap();
    let expect = 0.5 * (4f64.ln() + 0.5 - 1.0);
    assert!((kl_diag_gaussian(&q, &p).unwrap() - expect).abs() < 1e-15);
    assert_eq!(kl_diag_gaussian(&q, &q).unwrap(), 0.0);
}

#[test]
fn gaussian_log_prob_by_hand() {
    let d = DiagGaussian::vector(vec![0.0, 2.0], vec![0.0, 0.0]).unwrap();
    // two unit normals at distance 1 and 0 from their means
    let expect = -LN_2PI - 0.5;
    assert!((gaussian_log_prob(&d, &[1.0, 2.0]).unwrap() - expect).abs() < 1e-14);
}

#[test]
fn bernoulli_log_prob_by_hand() {
    let img = BernoulliImage::new(vec![0.0, 3f64.ln()], 1, 2).unwrap();
    // p = 0.5 and p = 0.75
    let expect = 0.5f64.ln() + 0.25f64.ln();
    assert!((bernoulli_log_prob(&img, &[1.0, 0.0]).unwrap() - expect).abs() < 1e-14);
}

#[test]
fn oracle_marginal_two_observations() {
    // X ~ N(0, [[3, 1], [1, 3]]) with unit variances; det 8, x' inv x = 1 at (1, -1).
    let inst = LinearGaussianInstance::new(1.0, 1.0, 1.0, vec![1.0, -1.0]).unwrap();
    let expect = -LN_2PI - 0.5 * 8f64.ln() - 0.5;
    assert!((exact_log_marginal(&inst) - expect).abs() < 1e-12);
}

#[test]
fn oracle_predictive_by_hand() {
    // c | x ~ N(x * v_c / (v_c + v_z + v_x), v_c (v_z + v_x) / (v_c + v_z + v_x)) = N(1/3, 2/3)
    // next x = c + z + e: mean 1/3, variance 2/3 + 2
    let inst = LinearGaussianInstance::new(1.0, 1.0, 1.0, vec![1.0]).unwrap();
    let (m, v) = exact_predictive(&inst);
    assert!((m - 1.0 / 3.0).abs() < 1e-12);
    assert!((v - 8.0 / 3.0).abs() < 1e-12);
}

#[test]
fn invalid_oracle_instances_are_rejected() {
    assert!(LinearGaussianInstance::new(0.0, 1.0, 1.0, vec![0.0]).is_err());
    assert!(LinearGaussianInstance::new(1.0, f64::NAN, 1.0, vec![0.0]).is_err());
}
