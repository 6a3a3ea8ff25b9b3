//! Linear Gaussian state-space filtering and smoothing.

mod ctcrw;

pub use ctcrw::{ctcrw_step_matrices, ctcrw_track_loglik, CtcrwStep, DIFFUSE_VARIANCE};
pub(crate) use ctcrw::{step_generic as ctcrw_step_generic, FilterState as CtcrwFilterState};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// State transition `x_{i+1} = T x_i + c + w`, `w ~ N(0, Q)`.
#[derive(Clone, Debug)]
pub struct Transition {
    pub t: DMatrix<f64>,
    pub c: DVector<f64>,
    pub q: DMatrix<f64>,
}

/// Observation `y_i = H x_i + d + v`, `v ~ N(0, R)`.
#[derive(Clone, Debug)]
pub struct Observation {
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
    pub r: DMatrix<f64>,
}

/// Time-varying linear Gaussian state-space model over `n` observation
/// times. `transitions[i]` moves the state from time `i` to time `i + 1`.
#[derive(Clone, Debug)]
pub struct StateSpaceModel {
    pub transitions: Vec<Transition>,
    pub observations: Vec<Observation>,
    pub a0: DVector<f64>,
    pub p0: DMatrix<f64>,
    /// Exclude the first observed vector from the log-likelihood (it is used
    /// to initialise the state only).
    pub anchor_first: bool,
}

impl StateSpaceModel {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.a0.len()
    }

    fn check(&self, y: &[Option<DVector<f64>>]) -> Result<()> {
        let n = self.len();
        if y.len() != n {
            return Err(Error::Dimension(format!(
                "{} observations for a model of length {n}",
                y.len()
            )));
        }
        if n > 0 && self.transitions.len() != n - 1 {
            return Err(Error::Dimension(format!(
                "{} transitions for {n} observation times",
                self.transitions.len()
            )));
        }
        Ok(())
    }
}

/// Per-step output of the forward filter.
#[derive(Clone, Debug)]
pub struct FilterOutput {
    pub predicted_mean: Vec<DVector<f64>>,
    pub predicted_cov: Vec<DMatrix<f64>>,
    pub filtered_mean: Vec<DVector<f64>>,
    pub filtered_cov: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

/// Smoothed state moments.
#[derive(Clone, Debug)]
pub struct Smoothed {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

/// Forward Kalman filter with Joseph-form covariance updates. Missing
/// observations (`None`) give prediction-only steps.
pub fn kalman_filter(model: &StateSpaceModel, y: &[Option<DVector<f64>>]) -> Result<FilterOutput> {
    model.check(y)?;
    let n = model.len();
    let m = model.state_dim();
    let mut out = FilterOutput {
        predicted_mean: Vec::with_capacity(n),
        predicted_cov: Vec::with_capacity(n),
        filtered_mean: Vec::with_capacity(n),
        filtered_cov: Vec::with_capacity(n),
        loglik: 0.0,
    };
    let mut a = model.a0.clone();
    let mut p = model.p0.clone();
    let mut anchored = !model.anchor_first;
    for i in 0..n {
        if i > 0 {
            let tr = &model.transitions[i - 1];
            a = &tr.t * &a + &tr.c;
            p = &tr.t * &p * tr.t.transpose() + &tr.q;
            symmetrize(&mut p);
        }
        out.predicted_mean.push(a.clone());
        out.predicted_cov.push(p.clone());
        if let Some(yi) = &y[i] {
            let ob = &model.observations[i];
            let v = yi - (&ob.h * &a + &ob.d);
            let ph = &p * ob.h.transpose();
            let mut f = &ob.h * &ph + &ob.r;
            symmetrize(&mut f);
            let chol = f.clone().cholesky().ok_or_else(|| Error::NumericalDegeneracy {
                step: i,
                reason: "innovation covariance is not positive definite".into(),
            })?;
            let finv_v = chol.solve(&v);
            if anchored {
                let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                out.loglik += -(v.len() as f64) * HALF_LN_2PI - 0.5 * logdet - 0.5 * v.dot(&finv_v);
            }
            anchored = true;
            let k = chol.solve(&ph.transpose()).transpose();
            a += &k * v;
            let ikh = DMatrix::identity(m, m) - &k * &ob.h;
            p = &ikh * &p * ikh.transpose() + &k * &ob.r * k.transpose();
            symmetrize(&mut p);
        }
        out.filtered_mean.push(a.clone());
        out.filtered_cov.push(p.clone());
    }
    if !out.loglik.is_finite() {
        return Err(Error::NumericalDegeneracy {
            step: n.saturating_sub(1),
            reason: "non-finite log-likelihood".into(),
        });
    }
    Ok(out)
}

pub fn kalman_loglik(model: &StateSpaceModel, y: &[Option<DVector<f64>>]) -> Result<f64> {
    Ok(kalman_filter(model, y)?.loglik)
}

/// Rauch–Tung–Striebel fixed-interval smoother.
pub fn kalman_smooth(model: &StateSpaceModel, y: &[Option<DVector<f64>>]) -> Result<Smoothed> {
    let f = kalman_filter(model, y)?;
    let n = model.len();
    let mut mean = f.filtered_mean.clone();
    let mut cov = f.filtered_cov.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        let tr = &model.transitions[i];
        let pp = &f.predicted_cov[i + 1];
        let cross = &f.filtered_cov[i] * tr.t.transpose();
        let gain = match pp.clone().cholesky() {
            Some(ch) => ch.solve(&cross.transpose()).transpose(),
            None => {
                let pinv = pp
                    .clone()
                    .pseudo_inverse(1e-12)
                    .map_err(|e| Error::NumericalDegeneracy { step: i + 1, reason: e.to_string() })?;
                &cross * pinv
            }
        };
        let dm = &mean[i + 1] - &f.predicted_mean[i + 1];
        mean[i] = &f.filtered_mean[i] + &gain * dm;
        let dp = &cov[i + 1] - pp;
        let mut c = &f.filtered_cov[i] + &gain * dp * gain.transpose();
        symmetrize(&mut c);
        cov[i] = c;
    }
    Ok(Smoothed { mean, cov })
}

/// Latent Brownian motion with drift observed with noise: state `L`,
/// `L_{i+1} = L_i + r_i Δ_i + s_i √Δ_i ε`, `y_i = L_i + v_i`,
/// `v_i ~ N(0, tau2 / w_i)`.
pub fn latent_bm_model(
    times: &[f64],
    r: &[f64],
    s: &[f64],
    tau2: f64,
    weights: &[f64],
) -> Result<StateSpaceModel> {
    let n = times.len();
    if r.len() != n || s.len() != n || weights.len() != n {
        return Err(Error::Dimension("latent BM inputs must have equal length".into()));
    }
    if weights.iter().any(|&w| !(w > 0.0)) || !(tau2 >= 0.0) {
        return Err(Error::Domain("observation weights must be positive".into()));
    }
    let mut transitions = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        let dt = times[i] - times[i - 1];
        if !(dt > 0.0) {
            return Err(Error::Data(format!("time is not increasing at row {i}")));
        }
        transitions.push(Transition {
            t: DMatrix::from_element(1, 1, 1.0),
            c: DVector::from_element(1, r[i - 1] * dt),
            q: DMatrix::from_element(1, 1, s[i - 1] * s[i - 1] * dt),
        });
    }
    let observations = weights
        .iter()
        .map(|&w| Observation {
            h: DMatrix::from_element(1, 1, 1.0),
            d: DVector::zeros(1),
            r: DMatrix::from_element(1, 1, tau2 / w),
        })
        .collect();
    Ok(StateSpaceModel {
        transitions,
        observations,
        a0: DVector::zeros(1),
        p0: DMatrix::from_element(1, 1, DIFFUSE_VARIANCE),
        anchor_first: false,
    })
}

/// Two-dimensional CTCRW state-space model for a single coordinate, with
/// position observed exactly (or with variance `obs_var`).
pub fn ctcrw_model(
    times: &[f64],
    r: &[f64],
    s: &[f64],
    first_position: f64,
    obs_var: f64,
) -> Result<StateSpaceModel> {
    let n = times.len();
    if r.len() != n || s.len() != n {
        return Err(Error::Dimension("CTCRW inputs must have equal length".into()));
    }
    let mut transitions = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        let (t, q) = ctcrw_step_matrices(times[i] - times[i - 1], r[i - 1], s[i - 1])?;
        transitions.push(Transition {
            t: DMatrix::from_iterator(2, 2, t.iter().copied()),
            c: DVector::zeros(2),
            q: DMatrix::from_iterator(2, 2, q.iter().copied()),
        });
    }
    let observations = (0..n)
        .map(|_| Observation {
            h: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            d: DVector::zeros(1),
            r: DMatrix::from_element(1, 1, obs_var),
        })
        .collect();
    Ok(StateSpaceModel {
        transitions,
        observations,
        a0: DVector::from_vec(vec![first_position, 0.0]),
        p0: DMatrix::identity(2, 2) * DIFFUSE_VARIANCE,
        anchor_first: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Joint Gaussian of all observed components, built directly from the
    /// model definition.
    fn dense_oracle(
        model: &StateSpaceModel,
        y: &[Option<DVector<f64>>],
    ) -> (f64, Vec<DVector<f64>>) {
        let n = model.len();
        let m = model.state_dim();
        // state means and covariances Cov(x_i, x_j)
        let mut mu = vec![model.a0.clone()];
        for i in 1..n {
            let tr = &model.transitions[i - 1];
            mu.push(&tr.t * &mu[i - 1] + &tr.c);
        }
        let big = n * m;
        let mut sx = DMatrix::zeros(big, big);
        let mut var = model.p0.clone();
        for i in 0..n {
            if i > 0 {
                let tr = &model.transitions[i - 1];
                var = &tr.t * &var * tr.t.transpose() + &tr.q;
            }
            // Cov(x_j, x_i) = Φ(j, i) Var(x_i) for j ≥ i
            let mut phi = DMatrix::identity(m, m);
            for j in i..n {
                if j > i {
                    phi = &model.transitions[j - 1].t * phi;
                }
                let c = &phi * &var;
                sx.view_mut((j * m, i * m), (m, m)).copy_from(&c);
                sx.view_mut((i * m, j * m), (m, m)).copy_from(&c.transpose());
            }
        }
        let mut rows = Vec::new();
        let mut yv = Vec::new();
        let mut ymu = Vec::new();
        let mut blocks = Vec::new();
        for i in 0..n {
            if let Some(yi) = &y[i] {
                let ob = &model.observations[i];
                let start = rows.len();
                for k in 0..yi.len() {
                    rows.push((i, ob.h.row(k).clone_owned(), ob.r.row(k).clone_owned()));
                    yv.push(yi[k]);
                    ymu.push((&ob.h * &mu[i] + &ob.d)[k]);
                }
                blocks.push((i, start, yi.len()));
            }
        }
        let k = rows.len();
        let mut syy = DMatrix::zeros(k, k);
        let mut sxy = DMatrix::zeros(big, k);
        for (a, (ia, ha, ra)) in rows.iter().enumerate() {
            for (b, (ib, hb, _)) in rows.iter().enumerate() {
                let cx = sx.view((ia * m, ib * m), (m, m));
                syy[(a, b)] = (ha * cx * hb.transpose())[(0, 0)];
            }
            // measurement noise within the same time block
            for (b, (ib, _, _)) in rows.iter().enumerate() {
                if ia == ib {
                    let off = blocks.iter().find(|bl| bl.0 == *ia).unwrap().1;
                    syy[(a, b)] += ra[b - off];
                }
            }
            for j in 0..n {
                let cx = sx.view((j * m, ia * m), (m, m));
                let col = cx * ha.transpose();
                for s in 0..m {
                    sxy[(j * m + s, a)] = col[s];
                }
            }
        }
        let yv = DVector::from_vec(yv);
        let ymu = DVector::from_vec(ymu);
        let mvn = |idx: &[usize]| -> f64 {
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| syy[(idx[a], idx[b])]);
            let d = DVector::from_fn(idx.len(), |a, _| yv[idx[a]] - ymu[idx[a]]);
            let ch = sub.cholesky().unwrap();
            let ld: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            -(idx.len() as f64) * HALF_LN_2PI - 0.5 * ld - 0.5 * d.dot(&ch.solve(&d))
        };
        let all: Vec<usize> = (0..k).collect();
        let mut ll = mvn(&all);
        if model.anchor_first {
            let (_, start, len) = blocks[0];
            ll -= mvn(&(start..start + len).collect::<Vec<_>>());
        }
        let gain = &sxy * syy.clone().try_inverse().unwrap();
        let post = DVector::from_iterator(big, mu.iter().flat_map(|v| v.iter().copied()))
            + gain * (&yv - &ymu);
        let means = (0..n).map(|i| post.rows(i * m, m).clone_owned()).collect();
        (ll, means)
    }

    fn two_state_model() -> StateSpaceModel {
        let n = 6;
        let transitions = (1..n)
            .map(|i| Transition {
                t: DMatrix::from_row_slice(2, 2, &[1.0, 0.3 + 0.05 * i as f64, 0.0, 0.8]),
                c: DVector::from_vec(vec![0.1, -0.05 * i as f64]),
                q: DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.3]),
            })
            .collect();
        let observations = (0..n)
            .map(|i| Observation {
                h: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]),
                d: DVector::from_vec(vec![0.0, 0.02 * i as f64]),
                r: DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.5]),
            })
            .collect();
        StateSpaceModel {
            transitions,
            observations,
            a0: DVector::from_vec(vec![0.5, -0.2]),
            p0: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]),
            anchor_first: false,
        }
    }

    fn obs(vals: &[(f64, f64)]) -> Vec<Option<DVector<f64>>> {
        vals.iter()
            .map(|&(a, b)| Some(DVector::from_vec(vec![a, b])))
            .collect()
    }

    #[test]
    fn matches_dense_gaussian() {
        let model = two_state_model();
        let y = obs(&[(0.3, 0.1), (0.9, -0.4), (1.2, 0.3), (1.1, 0.0), (1.9, 0.7), (2.2, 0.2)]);
        let (oracle, means) = dense_oracle(&model, &y);
        let got = kalman_loglik(&model, &y).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        let sm = kalman_smooth(&model, &y).unwrap();
        for (a, b) in sm.mean.iter().zip(&means) {
            assert!((a - b).amax() < 1e-8);
        }
    }

    #[test]
    fn missing_and_anchor_match_dense_gaussian() {
        let mut model = two_state_model();
        model.anchor_first = true;
        let mut y = obs(&[(0.3, 0.1), (0.9, -0.4), (1.2, 0.3), (1.1, 0.0), (1.9, 0.7), (2.2, 0.2)]);
        y[0] = None;
        y[3] = None;
        let (oracle, means) = dense_oracle(&model, &y);
        let got = kalman_loglik(&model, &y).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        let sm = kalman_smooth(&model, &y).unwrap();
        for (a, b) in sm.mean.iter().zip(&means) {
            assert!((a - b).amax() < 1e-8);
        }
    }

    #[test]
    fn missing_step_equals_merged_transition() {
        // dropping an observation equals composing the two transitions
        let times = [0.0, 0.5, 1.2, 2.0];
        let r = [0.3, -0.2, 0.1, 0.0];
        let s = [1.0, 0.7, 1.3, 1.0];
        let model = latent_bm_model(&times, &r, &s, 0.2, &[1.0; 4]).unwrap();
        let y = vec![
            Some(DVector::from_element(1, 0.1)),
            None,
            Some(DVector::from_element(1, 0.4)),
            Some(DVector::from_element(1, 0.9)),
        ];
        let full = kalman_loglik(&model, &y).unwrap();
        let mut merged = latent_bm_model(&[0.0, 1.2, 2.0], &[0.0; 3], &[1.0; 3], 0.2, &[1.0; 3]).unwrap();
        merged.transitions[0].c[0] = r[0] * 0.5 + r[1] * 0.7;
        merged.transitions[0].q[(0, 0)] = s[0] * s[0] * 0.5 + s[1] * s[1] * 0.7;
        merged.transitions[1].c[0] = r[2] * 0.8;
        merged.transitions[1].q[(0, 0)] = s[2] * s[2] * 0.8;
        let y2 = vec![y[0].clone(), y[2].clone(), y[3].clone()];
        let m = kalman_loglik(&merged, &y2).unwrap();
        assert!((full - m).abs() < 1e-10);
    }

    #[test]
    fn noiseless_observation_is_reproduced() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let model = latent_bm_model(&times, &[0.0; 4], &[1.0; 4], 0.0, &[1.0; 4]).unwrap();
        let vals = [0.2, -0.5, 0.7, 1.1];
        let y: Vec<_> = vals.iter().map(|&v| Some(DVector::from_element(1, v))).collect();
        let sm = kalman_smooth(&model, &y).unwrap();
        for (m, v) in sm.mean.iter().zip(vals) {
            assert!((m[0] - v).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_innovation_reports_step() {
        let times = [0.0, 1.0, 2.0];
        let mut model = latent_bm_model(&times, &[0.0; 3], &[0.0; 3], 0.0, &[1.0; 3]).unwrap();
        model.p0[(0, 0)] = 0.0;
        let y: Vec<_> = (0..3).map(|_| Some(DVector::from_element(1, 0.0))).collect();
        match kalman_loglik(&model, &y) {
            Err(Error::NumericalDegeneracy { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn specialised_ctcrw_filter_matches_generic() {
        let times = [0.0, 0.4, 1.0, 1.3, 2.5, 2.6];
        let r = [0.8, 1.2, 0.5, 2.0, 0.9, 1.0];
        let s = [1.0, 0.6, 1.5, 0.9, 1.1, 1.0];
        let pos = [Some(0.0), Some(0.3), None, Some(1.1), Some(0.7), Some(0.75)];
        let model = ctcrw_model(&times, &r, &s, 0.0, 0.0).unwrap();
        let y: Vec<_> = pos.iter().map(|p| p.map(|v| DVector::from_element(1, v))).collect();
        let generic = kalman_loglik(&model, &y).unwrap();
        let fast = ctcrw_track_loglik(&times, &pos, &r, &s, 0.0).unwrap();
        assert!((generic - fast).abs() < 1e-7, "{generic} vs {fast}");
    }

    #[test]
    fn ctcrw_matches_dense_gaussian() {
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 + 0.1 * (i % 3) as f64).collect();
        let r: Vec<f64> = (0..10).map(|i| 0.5 + 0.1 * i as f64).collect();
        let s: Vec<f64> = (0..10).map(|i| 1.0 + 0.05 * i as f64).collect();
        let mut model = ctcrw_model(&times, &r, &s, 0.2, 0.0).unwrap();
        model.p0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let pos = [0.2, 0.5, 1.1, 0.9, 1.6, 2.4, 2.2, 2.9, 3.5, 3.1];
        let y: Vec<_> = pos.iter().map(|&v| Some(DVector::from_element(1, v))).collect();
        let (oracle, _) = dense_oracle(&model, &y);
        let got = kalman_loglik(&model, &y).unwrap();
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    }

    #[test]
    fn single_observation_smooth_equals_filter() {
        let model = latent_bm_model(&[0.0], &[0.0], &[1.0], 0.3, &[1.0]).unwrap();
        let y = vec![Some(DVector::from_element(1, 0.4))];
        let f = kalman_filter(&model, &y).unwrap();
        let sm = kalman_smooth(&model, &y).unwrap();
        assert_eq!(f.filtered_mean[0], sm.mean[0]);
        assert_eq!(f.filtered_cov[0], sm.cov[0]);
    }

    #[test]
    fn bm_state_space_equals_transition_product() {
        let times = [0.0, 0.3, 1.0, 1.4, 2.9];
        let r = [0.2, -0.4, 0.1, 0.3, 0.0];
        let s = [1.1, 0.8, 1.4, 0.6, 1.0];
        let z = [0.0, 0.4, -0.3, 0.2, 1.0];
        let mut model = latent_bm_model(&times, &r, &s, 0.0, &[1.0; 5]).unwrap();
        model.anchor_first = true;
        let y: Vec<_> = z.iter().map(|&v| Some(DVector::from_element(1, v))).collect();
        let got = kalman_loglik(&model, &y).unwrap();
        let direct: f64 = (1..5)
            .map(|i| crate::sde::logdens_bm(z[i - 1], z[i], times[i] - times[i - 1], r[i - 1], s[i - 1]))
            .sum();
        assert!((got - direct).abs() < 1e-9, "{got} vs {direct}");
    }

    #[test]
    fn ctcrw_q_matches_monte_carlo() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let (dt, r, s) = (1.0, 0.5, 1.0);
        let (_, q) = ctcrw_step_matrices(dt, r, s).unwrap();
        // fine-step Euler from the zero state; position increment and velocity
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let steps = 1000;
        let h = dt / steps as f64;
        let sh = s * h.sqrt();
        let reps = 1_000_000;
        let mut acc = [[0.0f64; 2]; 3];
        for _ in 0..reps {
            let (mut x, mut v) = (0.0f64, 0.0f64);
            for _ in 0..steps {
                let e: f64 = StandardNormal.sample(&mut rng);
                let v_new = v - r * v * h + sh * e;
                x += 0.5 * (v + v_new) * h;
                v = v_new;
            }
            for (k, val) in [x * x, x * v, v * v].into_iter().enumerate() {
                acc[k][0] += val;
                acc[k][1] += val * val;
            }
        }
        let n = reps as f64;
        for (k, target) in [q[(0, 0)], q[(0, 1)], q[(1, 1)]].into_iter().enumerate() {
            let mean = acc[k][0] / n;
            let se = ((acc[k][1] / n - mean * mean) / n).sqrt();
            assert!((mean - target).abs() < 5.0 * se, "entry {k}: {mean} vs {target} (se {se})");
        }
    }
}
