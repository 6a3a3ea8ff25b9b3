mod common;

use nalgebra::{DMatrix, DVector, Matrix2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use smoothsde::kalman::{
    ctcrw_model, ctcrw_step_matrices, kalman_filter, kalman_loglik, kalman_smooth, latent_bm_model,
};

use smoothsde::sde::{simulate_path, AuxValues, SdeFamily, ThetaGrid};

use common::*;

fn min_eigen(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Times with a missing observation inserted at the midpoint of every gap
/// listed in `split`.
fn refine(times: &[f64], y: &[f64], split: &[bool]) -> (Vec<f64>, Vec<Option<DVector<f64>>>) {
    let mut t = vec![times[0]];
    let mut obs = vec![Some(DVector::from_element(1, y[0]))];
    for i in 1..times.len() {
        if split[i - 1] {
            t.push(0.5 * (times[i - 1] + times[i]));
            obs.push(None);
        }
        t.push(times[i]);
        obs.push(Some(DVector::from_element(1, y[i])));
    }
    (t, obs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn filter_matches_dense_gaussian(seed in 0u64..1_000_000, n in 1usize..=12, m in 1usize..=3, q in 1usize..=2) {
        let mut g = rng(seed);
        let (model, y) = random_state_space(n, m, q, &mut g);
        prop_assume!(!model.anchor_first || y.iter().flatten().count() >= 2);
        let a = kalman_loglik(&model, &y).unwrap();
        let b = dense_loglik(&model, &y);
        prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
    }

    #[test]
    fn covariances_stay_positive_semidefinite(seed in 0u64..1_000_000, n in 1usize..=15, m in 1usize..=3) {
        let mut g = rng(seed);
        let (model, y) = random_state_space(n, m, 1, &mut g);
        let f = kalman_filter(&model, &y).unwrap();
        let s = kalman_smooth(&model, &y).unwrap();
        for c in f.predicted_cov.iter().chain(&f.filtered_cov).chain(&s.cov) {
            prop_assert!((c - c.transpose()).amax() < 1e-9 * c.amax().max(1.0));
            prop_assert!(min_eigen(c) >= -1e-9);
        }
        // the last smoothed state is the last filtered state
        prop_assert!((&s.mean[n - 1] - &f.filtered_mean[n - 1]).amax() < 1e-10);
        for (sc, fc) in s.cov.iter().zip(&f.filtered_cov) {
            prop_assert!(sc.trace() <= fc.trace() + 1e-9 * fc.trace().max(1.0));
        }
    }

    #[test]
    fn missing_time_points_leave_bm_likelihood_unchanged(seed in 0u64..1_000_000, n in 2usize..30) {
        let mut g = rng(seed);
        let times = irregular_times(n, 0.5, &mut g);
        let y: Vec<f64> = (0..n).map(|_| normal(&mut g)).collect();
        let split: Vec<bool> = (1..n).map(|_| g.random::<bool>()).collect();
        let (r, s, tau2) = (g.random_range(-1.0..1.0), g.random_range(0.2..2.0), g.random_range(0.01..1.0));
        let obs: Vec<_> = y.iter().map(|&v| Some(DVector::from_element(1, v))).collect();
        let base = latent_bm_model(&times, &vec![r; n], &vec![s; n], tau2, &vec![1.0; n]).unwrap();
        let (t2, obs2) = refine(&times, &y, &split);
        let k = t2.len();
        let fine = latent_bm_model(&t2, &vec![r; k], &vec![s; k], tau2, &vec![1.0; k]).unwrap();
        let (a, b) = (kalman_loglik(&base, &obs).unwrap(), kalman_loglik(&fine, &obs2).unwrap());
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn missing_time_points_leave_ctcrw_likelihood_unchanged(seed in 0u64..1_000_000, n in 2usize..30) {
        let mut g = rng(seed);
        let (r, s) = (g.random_range(0.1..3.0), g.random_range(0.2..2.0));
        let path = simulate_path(SdeFamily::Ctcrw, &ThetaGrid::constant(r, s, n - 1), 0.5, 0.0, &AuxValues::default(), seed).unwrap();
        let (times, y) = (path.times, path.values);
        let split: Vec<bool> = (1..n).map(|_| g.random::<bool>()).collect();
        let obs: Vec<_> = y.iter().map(|&v| Some(DVector::from_element(1, v))).collect();
        let mut base = ctcrw_model(&times, &vec![r; n], &vec![s; n], y[0], 0.0).unwrap();
        let (t2, obs2) = refine(&times, &y, &split);
        let k = t2.len();
        let mut fine = ctcrw_model(&t2, &vec![r; k], &vec![s; k], y[0], 0.0).unwrap();
        // proper initial prior: the diffuse default costs about 1e8·ε in the first update
        base.p0 = DMatrix::identity(2, 2);
        fine.p0 = DMatrix::identity(2, 2);
        let (a, b) = (kalman_loglik(&base, &obs).unwrap(), kalman_loglik(&fine, &obs2).unwrap());
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn ctcrw_steps_compose(a in 0.001f64..3.0, b in 0.001f64..3.0, r in 0.05f64..5.0, s in 0.1f64..3.0) {
        let (ta, qa) = ctcrw_step_matrices(a, r, s).unwrap();
        let (tb, qb) = ctcrw_step_matrices(b, r, s).unwrap();
        let (tab, qab) = ctcrw_step_matrices(a + b, r, s).unwrap();
        prop_assert!((tb * ta - tab).amax() < 1e-12 * tab.amax().max(1.0));
        let composed = tb * qa * tb.transpose() + qb;
        prop_assert!((composed - qab).amax() < 1e-9 * qab.amax().max(1e-12));
    }
}

#[test]
fn ctcrw_position_variance_is_cubic_for_short_steps() {
    let (r, s) = (2.0, 1.5);
    let dt = 1e-3 / r;
    let (_, q) = ctcrw_step_matrices(dt, r, s).unwrap();
    let lead = s * s * dt.powi(3) / 3.0;
    assert!((q[(0, 0)] - lead).abs() < 0.01 * lead, "{} vs {lead}", q[(0, 0)]);
}

#[test]
fn ctcrw_noise_matches_monte_carlo() {
    // fine Euler scheme for dv = -r v dt + s dW, dx = v dt, from the origin
    let (r, s, dt) = (1.3, 0.8, 0.7);
    let (_, q) = ctcrw_step_matrices(dt, r, s).unwrap();
    let mut g = rng(77);
    let (paths, steps) = (100_000, 400);
    let h = dt / steps as f64;
    let mut acc = Matrix2::<f64>::zeros();
    for _ in 0..paths {
        let (mut x, mut v) = (0.0, 0.0);
        for _ in 0..steps {
            let e: f64 = StandardNormal.sample(&mut g);
            x += v * h;
            v += -r * v * h + s * h.sqrt() * e;
        }
        acc += Matrix2::new(x * x, x * v, x * v, v * v);
    }
    let emp = acc / paths as f64;
    for (k, (&e, &w)) in emp.iter().zip(q.iter()).enumerate() {
        assert!((e - w).abs() < 0.03 * w.abs() + 1e-4, "entry {k}: monte carlo {e} vs closed form {w}");
    }
}
