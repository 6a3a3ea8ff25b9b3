use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::{InnerMode, JointObjective, DEGENERATE_EIGEN, RIDGE};
use super::optim::{minimize, BfgsOptions, OuterProblem};
use super::spec::ModelSpec;
use crate::basis::{CovariateSource, Link, ParamTerms};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize, MatrixData};
use crate::sde::{AuxValues, SdeFamily};

pub const LOG_LAMBDA_BOUNDS: (f64, f64) = (-20.0, 30.0);
const FD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-5;
const MAX_OUTER_STEP: f64 = 5.0;

/// Estimated model: coefficients, smoothing parameters, joint precision and
/// optimizer diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: SdeFamily,
    pub spec: ModelSpec,
    pub aux: AuxValues,
    pub zeta_estimated: bool,
    pub terms: Vec<ParamTerms>,
    pub fixed_labels: Vec<String>,
    pub penalty_labels: Vec<String>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_lambda: Vec<f64>,
    pub marginal_nll: f64,
    pub aic: f64,
    /// Precision of `(α, β)` at the optimum.
    pub precision: MatrixData,
    pub converged: bool,
    pub outer_iterations: usize,
    pub grad_norm: f64,
    pub inner_iterations: usize,
    /// Set when a ridge was added to a near-singular Hessian.
    pub degenerate: bool,
    /// Outer objective after each accepted step.
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn coefficients(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.alpha.len() + self.beta.len(),
            self.alpha.iter().chain(&self.beta).copied(),
        )
    }

    pub fn precision_matrix(&self) -> DMatrix<f64> {
        (&self.precision).into()
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let chol = self.precision_matrix().cholesky().ok_or_else(|| {
            Error::NotPositiveDefinite("joint precision is not positive definite; refit with ridge repair".into())
        })?;
        Ok(chol.inverse())
    }

    /// Standard errors of the fixed effects `α` on the link scale.
    pub fn standard_errors(&self) -> Result<Vec<f64>> {
        let cov = self.covariance()?;
        Ok((0..self.alpha.len()).map(|i| cov[(i, i)].sqrt()).collect())
    }

    pub fn n_aux_estimated(&self) -> usize {
        usize::from(self.zeta_estimated)
    }

    pub fn marginal_aic(&self) -> f64 {
        marginal_aic(self)
    }

    /// Design of parameter `k` against the full `(α, β)` vector.
    pub fn param_design(&self, k: usize, src: &dyn CovariateSource) -> Result<DMatrix<f64>> {
        let n = src.n_rows();
        let p_fe = self.alpha.len();
        let mut x = DMatrix::zeros(n, p_fe + self.beta.len());
        let (mut fe, mut re) = (0, 0);
        for (j, t) in self.terms.iter().enumerate() {
            if j == k {
                let xf = t.fixed_design(src)?;
                let xr = t.random_design(src)?;
                x.columns_mut(fe, xf.ncols()).copy_from(&xf);
                x.columns_mut(p_fe + re, xr.ncols()).copy_from(&xr);
            }
            fe += t.n_fixed();
            re += t.n_random();
        }
        Ok(x)
    }

    /// Fitted parameter values (after the inverse link) at every row of
    /// `src`.
    pub fn theta(&self, src: &dyn CovariateSource) -> Result<Vec<Vec<f64>>> {
        let u = self.coefficients();
        (0..self.terms.len())
            .map(|k| {
                let eta = self.param_design(k, src)? * &u;
                Ok(eta.iter().map(|&e| self.terms[k].link.inverse(e)).collect())
            })
            .collect()
    }
}

/// `2 · marginal NLL + 2 · (|α| + |λ| + estimated auxiliary scalars)`.
pub fn marginal_aic(fit: &FitResult) -> f64 {
    let k = fit.alpha.len() + fit.log_lambda.len() + fit.n_aux_estimated();
    2.0 * fit.marginal_nll + 2.0 * k as f64
}

/// Outer variables `x = (α, log λ, [ζ])`.
struct Outer<'a> {
    obj: &'a JointObjective,
    p_fe: usize,
    n_lambda: usize,
    estimate_zeta: bool,
    /// Mode at the most recently evaluated point.
    last: Option<(Vec<f64>, InnerMode)>,
    /// Mode at the most recent accepted point, used for warm starts.
    base: Option<(Vec<f64>, InnerMode)>,
    inner_iterations: usize,
    /// Diagonal second differences from the last gradient.
    curvature: Option<Vec<f64>>,
}

impl<'a> Outer<'a> {
    fn split(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, AuxValues) {
        let alpha = x[..self.p_fe].to_vec();
        let rho = x[self.p_fe..self.p_fe + self.n_lambda].to_vec();
        let mut aux = self.obj.aux();
        if self.estimate_zeta {
            aux.zeta = x[self.p_fe + self.n_lambda];
        }
        (alpha, rho, aux)
    }

    fn eval(&mut self, x: &[f64], beta0: Option<Vec<f64>>) -> Result<(f64, InnerMode)> {
        let (alpha, rho, aux) = self.split(x);
        let start = beta0.or_else(|| self.base.as_ref().map(|b| b.1.beta.clone()));
        let res = self.obj.laplace_aux(&alpha, &rho, &aux, start.as_deref());
        // a failed warm start is retried from zero
        let (v, mode) = match res {
            Ok(r) => r,
            Err(e) if start.is_some() => match self.obj.laplace_aux(&alpha, &rho, &aux, None) {
                Ok(r) => r,
                Err(_) => return Err(e),
            },
            Err(e) => return Err(e),
        };
        self.inner_iterations += mode.iterations;
        Ok((v, mode))
    }

    /// Linear prediction of `dβ̂/dx_i` from the implicit function theorem.
    fn beta_sensitivity(&self, x: &[f64], mode: &InnerMode) -> Vec<Option<DVector<f64>>> {
        let pf = self.p_fe;
        let q = mode.beta.len();
        let mut out = vec![None; x.len()];
        if q == 0 {
            return out;
        }
        let Some(chol) = mode.hessian.clone().cholesky() else {
            return out;
        };
        for (i, slot) in out.iter_mut().enumerate().take(pf) {
            let col = mode.joint_hessian.column(i).rows(pf, q).into_owned();
            *slot = Some(-chol.solve(&col));
        }
        for (j, blk) in self.obj.design().penalties.iter().enumerate() {
            let rho = x[pf + j];
            let b = DVector::from_column_slice(&mode.beta[blk.start..blk.start + blk.len]);
            let mut rhs = DVector::zeros(q);
            rhs.rows_mut(blk.start, blk.len).copy_from(&(&blk.matrix * b * rho.exp()));
            out[pf + j] = Some(-chol.solve(&rhs));
        }
        out
    }
}

impl OuterProblem for Outer<'_> {
    fn value(&mut self, x: &[f64]) -> Result<f64> {
        let (v, mode) = self.eval(x, None)?;
        self.last = Some((x.to_vec(), mode));
        Ok(v)
    }

    fn gradient(&mut self, x: &[f64], _fx: f64) -> Result<Vec<f64>> {
        let at_x = match &self.last {
            Some((lx, m)) if lx == x => m.clone(),
            _ => self.eval(x, None)?.1,
        };
        self.base = Some((x.to_vec(), at_x.clone()));
        let sens = self.beta_sensitivity(x, &at_x);
        let (lo, hi) = LOG_LAMBDA_BOUNDS;
        let mut grad = vec![0.0; x.len()];
        let mut curv = vec![f64::NAN; x.len()];
        for i in 0..x.len() {
            let h = FD_STEP * x[i].abs().max(1.0);
            let is_rho = i >= self.p_fe && i < self.p_fe + self.n_lambda;
            let fwd_ok = !is_rho || x[i] + h <= hi;
            let bwd_ok = !is_rho || x[i] - h >= lo;
            let mut eval_at = |sign: f64| -> Result<f64> {
                let mut xp = x.to_vec();
                xp[i] += sign * h;
                let start = sens[i].as_ref().map(|d| {
                    at_x.beta.iter().zip(d.iter()).map(|(b, s)| b + sign * h * s).collect()
                });
                Ok(self.eval(&xp, start)?.0)
            };
            let mut last_err = None;
            let mut side = |ok: bool, sign: f64| -> Option<f64> {
                if !ok {
                    return None;
                }
                eval_at(sign).map_err(|e| last_err = Some(e)).ok()
            };
            let fp = side(fwd_ok, 1.0);
            let fm = side(bwd_ok, -1.0);
            let f0 = at_x.laplace_value();
            grad[i] = match (fp, fm) {
                (Some(a), Some(b)) => {
                    curv[i] = (a - 2.0 * f0 + b) / (h * h);
                    (a - b) / (2.0 * h)
                }
                (Some(a), None) => (a - f0) / h,
                (None, Some(b)) => (f0 - b) / h,
                (None, None) => {
                    return Err(Error::NumericalDegeneracy {
                        step: i,
                        reason: format!(
                            "objective undefined on both sides of a finite-difference step ({})",
                            last_err.map_or_else(|| "outside bounds".to_string(), |e| e.to_string())
                        ),
                    })
                }
            };
        }
        self.curvature = Some(curv);
        Ok(grad)
    }

    fn curvature(&self) -> Option<Vec<f64>> {
        self.curvature.clone()
    }
}

/// Starting point of the outer optimization.
#[derive(Clone, Debug, Default)]
pub struct StartValues {
    pub alpha: Option<Vec<f64>>,
    pub log_lambda: Option<Vec<f64>>,
    pub zeta: Option<f64>,
    pub beta: Option<Vec<f64>>,
}

impl StartValues {
    pub fn from_fit(fit: &FitResult) -> Self {
        Self {
            alpha: Some(fit.alpha.clone()),
            log_lambda: Some(fit.log_lambda.clone()),
            zeta: fit.zeta_estimated.then_some(fit.aux.zeta),
            beta: Some(fit.beta.clone()),
        }
    }
}

/// Maximize the Laplace-approximate marginal likelihood over fixed effects,
/// log smoothing parameters and (for OU) ζ.
pub fn fit(spec: &ModelSpec, data: &Dataset) -> Result<FitResult> {
    fit_from(spec, data, &StartValues::default())
}

pub fn fit_from(spec: &ModelSpec, data: &Dataset, start: &StartValues) -> Result<FitResult> {
    let obj = JointObjective::new(spec, data)?;
    fit_objective(&obj, start)
}

pub fn fit_objective(obj: &JointObjective, start: &StartValues) -> Result<FitResult> {
    let spec = obj.spec();
    let p_fe = obj.p_fe();
    let n_lambda = obj.n_lambda();
    let estimate_zeta = spec.estimates_zeta();
    let (alpha0, zeta0) = obj.initial_values();
    let alpha0 = match &start.alpha {
        Some(a) if a.len() == p_fe => a.clone(),
        Some(_) => return Err(Error::Dimension("start α has the wrong length".into())),
        None => alpha0,
    };
    let rho0 = start.log_lambda.clone().unwrap_or_else(|| vec![0.0; n_lambda]);
    if rho0.len() != n_lambda {
        return Err(Error::Dimension("start log λ has the wrong length".into()));
    }
    let mut x0: Vec<f64> = alpha0.iter().chain(&rho0).copied().collect();
    if estimate_zeta {
        x0.push(start.zeta.unwrap_or(zeta0));
    }
    let n = x0.len();
    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    for j in 0..n_lambda {
        lower[p_fe + j] = LOG_LAMBDA_BOUNDS.0;
        upper[p_fe + j] = LOG_LAMBDA_BOUNDS.1;
    }
    let opts = BfgsOptions {
        rel_tol: spec.optimizer.rel_tol,
        grad_tol: GRAD_TOL,
        max_iter: spec.optimizer.max_iter,
        max_step: MAX_OUTER_STEP,
        lower,
        upper,
    };
    let mut outer = Outer {
        obj,
        p_fe,
        n_lambda,
        estimate_zeta,
        last: None,
        base: None,
        inner_iterations: 0,
        curvature: None,
    };
    if let Some(b) = &start.beta {
        if b.len() == obj.p_re() {
            let (_, mode) = outer.eval(&x0, Some(b.clone()))?;
            outer.base = Some((x0.clone(), mode));
        }
    }
    let out = minimize(&mut outer, &x0, &opts)?;
    let (alpha, rho, aux) = outer.split(&out.x);
    let (value, mode) = match outer.last.take() {
        Some((lx, m)) if lx == out.x => (m.laplace_value(), m),
        _ => {
            let warm = outer.base.as_ref().map(|b| b.1.beta.clone());
            obj.laplace_aux(&alpha, &rho, &aux, warm.as_deref())?
        }
    };
    let mut precision = mode.joint_hessian.clone();
    symmetrize(&mut precision);
    let mut degenerate = mode.degenerate;
    if min_eigenvalue(&precision) < DEGENERATE_EIGEN {
        for i in 0..precision.nrows() {
            precision[(i, i)] += RIDGE;
        }
        degenerate = true;
    }
    let ds = obj.design();
    let mut fit = FitResult {
        family: spec.family,
        spec: spec.clone(),
        aux,
        zeta_estimated: estimate_zeta,
        terms: ds.param_terms(),
        fixed_labels: ds.fixed_labels(),
        penalty_labels: ds.penalties.iter().map(|p| p.label.clone()).collect(),
        alpha,
        beta: mode.beta.clone(),
        log_lambda: rho,
        marginal_nll: value,
        aic: 0.0,
        precision: MatrixData::from(&precision),
        converged: out.converged,
        outer_iterations: out.iterations,
        grad_norm: out.grad_norm,
        inner_iterations: outer.inner_iterations,
        degenerate,
        trace: out.trace,
    };
    fit.aic = marginal_aic(&fit);
    Ok(fit)
}

/// Draws from `N((α̂, β̂), precision⁻¹)`, one per row.
pub fn posterior_samples(fit: &FitResult, n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    let p = fit.alpha.len() + fit.beta.len();
    if n_samples == 0 {
        return Ok(DMatrix::zeros(0, p));
    }
    let chol = fit.precision_matrix().cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite("joint precision is not positive definite; apply a ridge repair before sampling".into())
    })?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(p, n_samples, |_, _| StandardNormal.sample(&mut rng));
    let lt = chol.l().transpose();
    let dev = lt
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::NotPositiveDefinite("singular Cholesky factor".into()))?;
    let mean = fit.coefficients();
    let mut out = dev.transpose();
    for mut row in out.row_iter_mut() {
        row += mean.transpose();
    }
    Ok(out)
}

/// Fitted parameter curve on a covariate grid with pointwise bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterCurve {
    pub param: String,
    pub link: Link,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Rows outside the construction range of a smooth term.
    pub extrapolated: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub n_samples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            level: 0.95,
            seed: 1,
        }
    }
}

/// Type-7 sample quantile of sorted values.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bands of linear-predictor draws, mapped through the link.
pub(crate) fn bands(eta_draws: &[f64], level: f64, link: Link) -> (f64, f64) {
    if level >= 1.0 {
        return (link.inverse(f64::NEG_INFINITY), link.inverse(f64::INFINITY));
    }
    let mut v = eta_draws.to_vec();
    v.sort_by(f64::total_cmp);
    if level <= 0.0 {
        let m = link.inverse(quantile_sorted(&v, 0.5));
        return (m, m);
    }
    let a = 0.5 * (1.0 - level);
    (
        link.inverse(quantile_sorted(&v, a)),
        link.inverse(quantile_sorted(&v, 1.0 - a)),
    )
}

/// Evaluate every SDE parameter on a covariate table, with pointwise bands
/// from posterior draws.
pub fn predict_parameters(
    fit: &FitResult,
    src: &dyn CovariateSource,
    opts: &PredictOptions,
) -> Result<Vec<ParameterCurve>> {
    let draws = posterior_samples(fit, opts.n_samples, opts.seed)?;
    predict_with_draws(fit, src, &draws, opts.level)
}

pub fn predict_with_draws(
    fit: &FitResult,
    src: &dyn CovariateSource,
    draws: &DMatrix<f64>,
    level: f64,
) -> Result<Vec<ParameterCurve>> {
    let u = fit.coefficients();
    let n = src.n_rows();
    let mut curves = Vec::with_capacity(fit.terms.len());
    for (k, terms) in fit.terms.iter().enumerate() {
        let x = fit.param_design(k, src)?;
        let eta = &x * &u;
        let link = terms.link;
        let eta_draws = &x * draws.transpose();
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        for i in 0..n {
            if draws.nrows() == 0 {
                let e = link.inverse(eta[i]);
                lower.push(e);
                upper.push(e);
                continue;
            }
            let row: Vec<f64> = eta_draws.row(i).iter().copied().collect();
            let (lo, hi) = bands(&row, level, link);
            lower.push(lo);
            upper.push(hi);
        }
        curves.push(ParameterCurve {
            param: terms.name.clone(),
            link,
            estimate: eta.iter().map(|&e| link.inverse(e)).collect(),
            lower,
            upper,
            extrapolated: (0..n).map(|i| terms.extrapolated(src, i)).collect(),
        });
    }
    Ok(curves)
}
