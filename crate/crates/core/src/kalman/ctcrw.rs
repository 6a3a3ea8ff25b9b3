//! Integrated Ornstein–Uhlenbeck (velocity OU) transitions and the
//! specialised two-state filter used when fitting CTCRW models.

use nalgebra::Matrix2;

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Below this value of `rΔ` the position variance is evaluated by its power
/// series to avoid cancellation.
const SERIES_THRESHOLD: f64 = 0.1;
const SERIES_TERMS: usize = 18;

/// Prior variance used for the diffuse initial state.
pub const DIFFUSE_VARIANCE: f64 = 1e8;

/// Transition and noise covariance entries of the (position, velocity) state
/// over one interval: `T = [[1, t12], [0, t22]]`, `Q = [[q11, q12], [q12, q22]]`.
#[derive(Clone, Copy, Debug)]
pub struct CtcrwStep<R> {
    pub t12: R,
    pub t22: R,
    pub q11: R,
    pub q12: R,
    pub q22: R,
}

/// `x - 2(1 - e^{-x}) + (1 - e^{-2x})/2`, i.e. `r³ Q11 / s²`.
fn position_variance_kernel<R: Real>(x: R) -> R {
    if x.value() < SERIES_THRESHOLD {
        // Σ_{k≥3} (-1)^k (2 - 2^{k-1}) x^k / k!
        let mut sum = R::cst(0.0);
        let mut power = x * x * x;
        let mut fact = 6.0;
        for k in 3..(3 + SERIES_TERMS) {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let coef = sign * (2.0 - 2f64.powi(k as i32 - 1)) / fact;
            sum = sum + power * coef;
            power = power * x;
            fact *= (k + 1) as f64;
        }
        sum
    } else {
        let e1 = (-x).exp_m1();
        let e2 = (x * -2.0).exp_m1();
        x + e1 * 2.0 - e2 * 0.5
    }
}

pub(crate) fn step_generic<R: Real>(dt: f64, r: R, s: R) -> CtcrwStep<R> {
    let x = r * dt;
    let e1 = (-x).exp_m1();
    let e2 = (x * -2.0).exp_m1();
    let s2 = s * s;
    let r2 = r * r;
    CtcrwStep {
        t12: -e1 / r,
        t22: e1 + 1.0,
        q11: s2 / (r2 * r) * position_variance_kernel(x),
        q12: s2 / (r2 * 2.0) * e1 * e1,
        q22: -(s2 / (r * 2.0) * e2),
    }
}

/// Transition matrix `T` and noise covariance `Q` of the integrated-OU state
/// `(position, velocity)` over an interval `dt` with reversion `r` and
/// diffusion `s`.
pub fn ctcrw_step_matrices(dt: f64, r: f64, s: f64) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("reversion rate r must be positive, got {r}")));
    }
    if !(dt > 0.0) || !(s >= 0.0) {
        return Err(Error::Domain(format!(
            "invalid CTCRW step (dt = {dt}, s = {s})"
        )));
    }
    let st = step_generic(dt, r, s);
    Ok((
        Matrix2::new(1.0, st.t12, 0.0, st.t22),
        Matrix2::new(st.q11, st.q12, st.q12, st.q22),
    ))
}

/// Filtered (position, velocity) mean and covariance `[P11, P12, P22]`,
/// with `det(P)` carried separately.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FilterState<R> {
    pub a: [R; 2],
    pub p: [R; 3],
    pub det: R,
}

impl<R: Real> FilterState<R> {
    pub fn new(a: [R; 2], p: [R; 3]) -> Self {
        Self {
            a,
            p,
            det: p[0] * p[2] - p[1] * p[1],
        }
    }

    pub fn diffuse(position: f64) -> Self {
        Self::new(
            [R::cst(position), R::cst(0.0)],
            [
                R::cst(DIFFUSE_VARIANCE),
                R::cst(0.0),
                R::cst(DIFFUSE_VARIANCE),
            ],
        )
    }

    pub fn predict(&self, st: &CtcrwStep<R>) -> Self {
        let [a1, a2] = self.a;
        let [p11, p12, p22] = self.p;
        // A = T P T'
        let a11 = p11 + st.t12 * p12 * 2.0 + st.t12 * st.t12 * p22;
        let a12 = st.t22 * p12 + st.t12 * st.t22 * p22;
        let a22 = st.t22 * st.t22 * p22;
        // det(A + Q) = det A + det Q + tr(adj(A) Q), free of the cancellation
        // in p11 p22 - p12² when P holds the diffuse variance
        let det = st.t22 * st.t22 * self.det + (st.q11 * st.q22 - st.q12 * st.q12) + a22 * st.q11
            - a12 * st.q12 * 2.0
            + a11 * st.q22;
        Self {
            a: [a1 + st.t12 * a2, st.t22 * a2],
            p: [a11 + st.q11, a12 + st.q12, a22 + st.q22],
            det,
        }
    }

    /// Update with a position observation of variance `obs_var` (Joseph
    /// form when `obs_var > 0`). Returns the updated state, the innovation log-density, and
    /// the innovation variance.
    pub fn update(&self, y: f64, obs_var: f64) -> (Self, R, f64) {
        let [a1, a2] = self.a;
        let [p11, p12, p22] = self.p;
        let f = p11 + obs_var;
        let k1 = p11 / f;
        let k2 = p12 / f;
        let v = -a1 + y;
        let one_m_k1 = -k1 + 1.0;
        let n11 = one_m_k1 * one_m_k1 * p11 + k1 * k1 * obs_var;
        let n12 = -(one_m_k1 * p11 * k2) + one_m_k1 * p12 + k1 * k2 * obs_var;
        let ll = -(f.ln() * 0.5) - v * v / (f * 2.0) - 0.918_938_533_204_672_8;
        let fv = f.value();
        let a = [a1 + k1 * v, a2 + k2 * v];
        if obs_var == 0.0 {
            // exact position: the velocity variance is the Schur complement
            // det(P) / P11, and the position is known
            let zero = R::cst(0.0);
            let n22 = self.det / p11;
            return (
                Self {
                    a: [R::cst(y), a[1]],
                    p: [zero, zero, n22],
                    det: zero,
                },
                ll,
                fv,
            );
        }
        let row = -(k2 * p11) + p12;
        let n22 = -(row * k2) + (-(k2 * p12) + p22) + k2 * k2 * obs_var;
        (Self::new(a, [n11, n12, n22]), ll, fv)
    }
}

/// Log-likelihood of one coordinate of a CTCRW track with position
/// observations `y` (None = missing), parameters `r[i]`, `s[i]` governing
/// the interval after row `i`. The first observed position anchors the
/// track and does not contribute.
pub fn ctcrw_track_loglik(
    times: &[f64],
    y: &[Option<f64>],
    r: &[f64],
    s: &[f64],
    obs_var: f64,
) -> Result<f64> {
    let n = times.len();
    let first = y
        .iter()
        .position(|v| v.is_some())
        .ok_or_else(|| Error::Data("track has no observed positions".into()))?;
    let mut state = FilterState::<f64>::diffuse(y[first].unwrap_or(0.0));
    let mut ll = 0.0;
    for i in 0..n {
        if i > 0 {
            let st = step_generic(times[i] - times[i - 1], r[i - 1], s[i - 1]);
            state = state.predict(&st);
        }
        if let Some(yi) = y[i] {
            let (next, l, f) = state.update(yi, obs_var);
            if !(f > 0.0) || !f.is_finite() {
                return Err(Error::NumericalDegeneracy {
                    step: i,
                    reason: format!("innovation variance {f}"),
                });
            }
            if i != first {
                ll += l;
            }
            state = next;
        }
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuity_at_small_step() {
        let (t, q) = ctcrw_step_matrices(1e-8, 1.0, 1.0).unwrap();
        assert!((t - Matrix2::identity()).norm() < 1e-6);
        assert!(q.norm() < 1e-6);
    }

    #[test]
    fn second_exact_observation_keeps_precision() {
        let (dt, r, s) = (0.5, 1.2, 0.3);
        let st = step_generic(dt, r, s);
        let state = FilterState::<f64>::diffuse(0.0).update(0.0, 0.0).0;
        let (post, _, f) = state.predict(&st).update(0.1, 0.0);
        let v = DIFFUSE_VARIANCE;
        let quad = st.t22 * st.t22 * st.q11 - 2.0 * st.t12 * st.t22 * st.q12 + st.t12 * st.t12 * st.q22;
        let exact = (v * quad + st.q11 * st.q22 - st.q12 * st.q12) / (st.t12 * st.t12 * v + st.q11);
        assert!((post.p[2] - exact).abs() < 1e-13 * exact, "{} vs {exact}", post.p[2]);
        assert_eq!(post.p[0], 0.0);
        assert!(f > 1e7);
    }

    #[test]
    fn velocity_variance_limit() {
        let (r, s) = (0.5, 1.3);
        let (_, q) = ctcrw_step_matrices(100.0, r, s).unwrap();
        let limit = s * s / (2.0 * r);
        assert!(((q[(1, 1)] - limit) / limit).abs() < 1e-12);
    }

    #[test]
    fn position_variance_leading_term() {
        let (r, s) = (1.0, 0.8);
        let dt = 1e-3;
        let (_, q) = ctcrw_step_matrices(dt, r, s).unwrap();
        let lead = s * s * dt.powi(3) / 3.0;
        assert!(((q[(0, 0)] - lead) / lead).abs() < 0.01);
    }

    #[test]
    fn series_and_closed_form_agree_near_threshold() {
        for x in [0.02f64, 0.05, 0.0999, 0.1001, 0.2] {
            let series = {
                let mut sum = 0.0;
                let mut fact = 1.0;
                for k in 1..40 {
                    fact *= k as f64;
                    if k >= 3 {
                        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                        sum += sign * (2.0 - 2f64.powi(k - 1)) * x.powi(k) / fact;
                    }
                }
                sum
            };
            let got = position_variance_kernel(x);
            assert!(((got - series) / series).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn q_is_psd() {
        for &(dt, r, s) in &[(0.1, 0.5, 1.0), (2.0, 3.0, 0.4), (1e-4, 0.01, 2.0), (10.0, 0.05, 1.0)] {
            let (_, q) = ctcrw_step_matrices(dt, r, s).unwrap();
            let det = q[(0, 0)] * q[(1, 1)] - q[(0, 1)] * q[(1, 0)];
            assert!(q[(0, 0)] > 0.0 && q[(1, 1)] > 0.0 && det > -1e-15);
        }
    }

    #[test]
    fn invalid_rate() {
        assert!(ctcrw_step_matrices(1.0, 0.0, 1.0).is_err());
    }
}
