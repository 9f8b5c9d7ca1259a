//! Kalman filter, EKF steps and the RTS mode estimate against dense
//! joint-Gaussian computations on linear models.

mod common;

use common::{random_linear_model, JointGaussian};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twisted_smc::gauss::Gaussian;
use twisted_smc::kalman::{ekf_run, erts_mode_estimate, kf_loglik};
use twisted_smc::ssm::{linear_gaussian_model, simulate, GaussianSsm};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn filter_matches_joint_gaussian(seed in 0u64..10_000, dx in 1usize..=3, dy in 1usize..=3, t in 0usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_linear_model(&mut rng, dx, dy);
        let data = simulate(&model, t, &mut rng).unwrap();
        let joint = JointGaussian::new(&model, t);
        let states = ekf_run(&model, &data).unwrap();
        for k in 0..=t {
            let (m, c) = joint.condition_x(k, &data.observations, 0, k);
            prop_assert!((&states[k].mean - m).amax() < 1e-8);
            prop_assert!((&states[k].cov - c).amax() < 1e-8);
            let ll = joint.log_marginal(&data.observations, 0, k);
            prop_assert!((states[k].loglik - ll).abs() < 1e-8 * (1.0 + ll.abs()));
        }
        let ll = joint.log_marginal(&data.observations, 0, t);
        prop_assert!((kf_loglik(&model, &data).unwrap() - ll).abs() < 1e-8 * (1.0 + ll.abs()));
    }

    #[test]
    fn smoothed_mode_matches_conditioning(seed in 0u64..10_000, dx in 1usize..=3, dy in 1usize..=2, l in 0usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_linear_model(&mut rng, dx, dy);
        let data = simulate(&model, l, &mut rng).unwrap();
        let joint = JointGaussian::new(&model, l);
        let (m, _) = joint.condition_x(0, &data.observations, 0, l);
        let est = erts_mode_estimate(&model, model.initial(), 0, &data.observations).unwrap();
        prop_assert!((est - m).amax() < 1e-8);
    }
}

#[test]
fn scalar_two_step_likelihood_by_hand() {
    // y = (y0, y1, y2) with x0 ~ N(ν, p), x_{k+1} = a x_k + w, y_k = x_k + v
    let (a, q, r, nu, p) = (0.7, 0.5, 0.3, 1.0, 2.0);
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    let model = linear_gaussian_model(m(a), m(q), m(1.0), m(r), DVector::from_element(1, nu), m(p)).unwrap();
    let data = simulate(&model, 2, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let v0 = p;
    let v1 = a * a * v0 + q;
    let v2 = a * a * v1 + q;
    let cov = nalgebra::Matrix3::new(
        v0 + r,
        a * v0,
        a * a * v0,
        a * v0,
        v1 + r,
        a * v1,
        a * a * v0,
        a * v1,
        v2 + r,
    );
    let mean = nalgebra::Vector3::new(nu, a * nu, a * a * nu);
    let y = nalgebra::Vector3::new(data.observations[0][0], data.observations[1][0], data.observations[2][0]);
    let e = y - mean;
    let expected = -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + e.dot(&(cov.try_inverse().unwrap() * e)));
    assert!((kf_loglik(&model, &data).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn smoothed_mode_with_shifted_prior_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_linear_model(&mut rng, 2, 1);
    let data = simulate(&model, 8, &mut rng).unwrap();
    let joint = JointGaussian::new(&model, 8);
    // prior over x_3 given y_{0:2}, then y_{3:6}
    let prior3 = {
        let (m, c) = joint.condition_x(3, &data.observations, 0, 2);
        Gaussian::new(m, c).unwrap()
    };
    let est = erts_mode_estimate(&model, &prior3, 3, &data.observations[3..=6]).unwrap();
    let (m, _) = joint.condition_x(3, &data.observations, 0, 6);
    assert!((est - m).amax() < 1e-8);
}
