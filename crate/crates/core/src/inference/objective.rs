use nalgebra::{DMatrix, DVector};

use super::engine::{Derivs, Engine, Order};
use super::spec::ModelSpec;
use crate::basis::{build_design_set, DesignSet, Link};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize};
use crate::sde::{AuxValues, SdeFamily};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Eigenvalue threshold below which the inner Hessian is ridge-adjusted.
pub const DEGENERATE_EIGEN: f64 = 1e-10;
pub const RIDGE: f64 = 1e-8;

/// Mode of the joint objective in `β` for fixed `(α, log λ)`.
#[derive(Clone, Debug)]
pub struct InnerMode {
    pub beta: Vec<f64>,
    /// Joint negative log-density at the mode.
    pub objective: f64,
    /// Hessian of the joint objective in `β` at the mode (ridge-adjusted if
    /// `degenerate`).
    pub hessian: DMatrix<f64>,
    pub log_det: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub degenerate: bool,
    /// Hessian of the joint objective in `(α, β)` at the mode, without
    /// ridge adjustment.
    pub joint_hessian: DMatrix<f64>,
}

impl InnerMode {
    /// Laplace approximation `J(β̂) - (q/2) log 2π + ½ log det H`.
    pub fn laplace_value(&self) -> f64 {
        self.objective - 0.5 * self.beta.len() as f64 * LN_2PI + 0.5 * self.log_det
    }
}

/// Penalized joint negative log-likelihood `-log L(α, β) - log[β | λ]` for a
/// model specification and dataset, with its Laplace approximation.
#[derive(Clone, Debug)]
pub struct JointObjective {
    spec: ModelSpec,
    design: DesignSet,
    engine: Engine,
    aux: AuxValues,
    /// `(index into α, mean, sd)`.
    priors: Vec<(usize, f64, f64)>,
    inner_tol: f64,
    inner_max_iter: usize,
}

impl JointObjective {
    pub fn new(spec: &ModelSpec, data: &Dataset) -> Result<Self> {
        let aux = spec.aux()?;
        let design = build_design_set(&spec.param_specs()?, data)?;
        let responses = spec.response_names();
        let engine = Engine::new(spec.family, &design, data, &responses)?;
        check_not_constant(&engine, &responses)?;
        let labels = design.fixed_labels();
        let priors = spec
            .priors
            .iter()
            .map(|p| {
                if !(p.sd > 0.0) {
                    return Err(Error::Config(format!("prior sd for '{}' must be positive", p.parameter)));
                }
                let idx = labels
                    .iter()
                    .position(|l| *l == p.parameter)
                    .ok_or_else(|| Error::UnknownName(format!("prior on unknown fixed effect '{}'", p.parameter)))?;
                Ok((idx, p.mean, p.sd))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            design,
            engine,
            aux,
            priors,
            inner_tol: spec.optimizer.inner_tol,
            inner_max_iter: spec.optimizer.inner_max_iter,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn design(&self) -> &DesignSet {
        &self.design
    }

    pub fn family(&self) -> SdeFamily {
        self.spec.family
    }

    pub fn aux(&self) -> AuxValues {
        self.aux
    }

    pub fn p_fe(&self) -> usize {
        self.design.p_fe()
    }

    pub fn p_re(&self) -> usize {
        self.design.p_re()
    }

    pub fn n_lambda(&self) -> usize {
        self.design.penalties.len()
    }

    fn check_lengths(&self, alpha: &[f64], beta: &[f64], log_lambda: &[f64]) -> Result<()> {
        if alpha.len() != self.p_fe() || beta.len() != self.p_re() || log_lambda.len() != self.n_lambda() {
            return Err(Error::Dimension(format!(
                "parameter lengths (α {}, β {}, log λ {}) do not match layout ({}, {}, {})",
                alpha.len(),
                beta.len(),
                log_lambda.len(),
                self.p_fe(),
                self.p_re(),
                self.n_lambda()
            )));
        }
        Ok(())
    }

    fn stack(&self, alpha: &[f64], beta: &[f64]) -> DVector<f64> {
        DVector::from_iterator(alpha.len() + beta.len(), alpha.iter().chain(beta).copied())
    }

    /// `-log[β | λ]` with full normalizing constants.
    fn penalty(&self, beta: &[f64], log_lambda: &[f64]) -> f64 {
        self.design
            .penalties
            .iter()
            .zip(log_lambda)
            .map(|(blk, &rho)| {
                let b = DVector::from_column_slice(&beta[blk.start..blk.start + blk.len]);
                let q = b.dot(&(&blk.matrix * &b));
                let r = blk.rank as f64;
                0.5 * rho.exp() * q - 0.5 * (r * rho + blk.log_pdet) + 0.5 * r * LN_2PI
            })
            .sum()
    }

    fn prior(&self, alpha: &[f64]) -> f64 {
        self.priors
            .iter()
            .map(|&(i, m, sd)| {
                let z = (alpha[i] - m) / sd;
                0.5 * z * z + sd.ln() + 0.5 * LN_2PI
            })
            .sum()
    }

    /// Joint objective and derivatives in `u = (α, β)`.
    pub(crate) fn derivs(
        &self,
        alpha: &[f64],
        beta: &[f64],
        log_lambda: &[f64],
        aux: &AuxValues,
        order: Order,
    ) -> Result<Derivs> {
        self.check_lengths(alpha, beta, log_lambda)?;
        let u = self.stack(alpha, beta);
        let mut d = self.engine.nll(&u, aux, order)?;
        if !d.value.is_finite() {
            return Ok(d);
        }
        d.value += self.penalty(beta, log_lambda) + self.prior(alpha);
        let pf = self.p_fe();
        if order >= Order::Gradient {
            for &(i, m, sd) in &self.priors {
                d.grad[i] += (alpha[i] - m) / (sd * sd);
            }
            for (blk, &rho) in self.design.penalties.iter().zip(log_lambda) {
                let b = DVector::from_column_slice(&beta[blk.start..blk.start + blk.len]);
                let g = &blk.matrix * b * rho.exp();
                let mut dst = d.grad.rows_mut(pf + blk.start, blk.len);
                dst += g;
            }
        }
        if order == Order::Hessian {
            for &(i, _, sd) in &self.priors {
                d.hess[(i, i)] += 1.0 / (sd * sd);
            }
            for (blk, &rho) in self.design.penalties.iter().zip(log_lambda) {
                let mut dst = d.hess.view_mut((pf + blk.start, pf + blk.start), (blk.len, blk.len));
                dst += &blk.matrix * rho.exp();
            }
            symmetrize(&mut d.hess);
        }
        Ok(d)
    }

    /// `-log L(α, β) - log[β | λ]` (plus any fixed-effect priors), using the
    /// auxiliary values of the specification.
    pub fn joint_nll(&self, alpha: &[f64], beta: &[f64], log_lambda: &[f64]) -> Result<f64> {
        self.joint_nll_aux(alpha, beta, log_lambda, &self.aux)
    }

    pub fn joint_nll_aux(&self, alpha: &[f64], beta: &[f64], log_lambda: &[f64], aux: &AuxValues) -> Result<f64> {
        Ok(self.derivs(alpha, beta, log_lambda, aux, Order::Value)?.value)
    }

    /// Joint objective with its exact gradient and Hessian in `(α, β)`.
    pub fn joint_derivatives(
        &self,
        alpha: &[f64],
        beta: &[f64],
        log_lambda: &[f64],
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let d = self.derivs(alpha, beta, log_lambda, &self.aux, Order::Hessian)?;
        Ok((d.value, d.grad, d.hess))
    }

    pub fn inner_mode(&self, alpha: &[f64], log_lambda: &[f64], beta0: Option<&[f64]>) -> Result<InnerMode> {
        self.inner_mode_aux(alpha, log_lambda, &self.aux, beta0)
    }

    /// Newton iterations with backtracking line search on `β`.
    pub fn inner_mode_aux(
        &self,
        alpha: &[f64],
        log_lambda: &[f64],
        aux: &AuxValues,
        beta0: Option<&[f64]>,
    ) -> Result<InnerMode> {
        let q = self.p_re();
        let pf = self.p_fe();
        let mut beta = match beta0 {
            Some(b) => b.to_vec(),
            None => vec![0.0; q],
        };
        self.check_lengths(alpha, &beta, log_lambda)?;
        let mut iterations = 0;
        loop {
            let d = self.derivs(alpha, &beta, log_lambda, aux, Order::Hessian)?;
            if !d.value.is_finite() {
                return Err(Error::NumericalDegeneracy {
                    step: d.bad_row.unwrap_or(0),
                    reason: "non-finite transition density in the inner problem".into(),
                });
            }
            let g = d.grad.rows(pf, q).into_owned();
            let mut h = d.hess.view((pf, pf), (q, q)).into_owned();
            let grad_norm = g.amax();
            let tol = self.inner_tol * (1.0 + d.value.abs());
            if grad_norm < tol || q == 0 {
                let mut degenerate = false;
                if min_eigenvalue(&h) < DEGENERATE_EIGEN {
                    for i in 0..q {
                        h[(i, i)] += RIDGE;
                    }
                    degenerate = true;
                }
                let log_det = match h.clone().cholesky() {
                    Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
                    None => {
                        return Err(Error::NotPositiveDefinite(
                            "inner Hessian is not positive definite after ridge repair".into(),
                        ))
                    }
                };
                return Ok(InnerMode {
                    beta,
                    objective: d.value,
                    hessian: h,
                    log_det,
                    iterations,
                    grad_norm,
                    degenerate,
                    joint_hessian: d.hess,
                });
            }
            if iterations >= self.inner_max_iter {
                return Err(Error::InnerFailure {
                    iterations,
                    grad_norm,
                    last_iterate: beta,
                });
            }
            iterations += 1;
            let step = newton_direction(&h, &g);
            let slope = g.dot(&step);
            // the predicted decrease is below the resolution of the objective,
            // so a descent test cannot discriminate; take the Newton step
            if -slope <= 1e-12 * (1.0 + d.value.abs()) {
                beta = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
                continue;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
                let v = self.derivs(alpha, &trial, log_lambda, aux, Order::Value)?.value;
                if v.is_finite() && v <= d.value + 1e-4 * t * slope {
                    beta = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // no further decrease is representable; take the full step
                // only if it does not increase the objective by more than
                // rounding
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
                let v = self.derivs(alpha, &trial, log_lambda, aux, Order::Value)?.value;
                if v.is_finite() && v <= d.value + 1e-10 * (1.0 + d.value.abs()) {
                    beta = trial;
                } else {
                    return Err(Error::InnerFailure {
                        iterations,
                        grad_norm,
                        last_iterate: beta,
                    });
                }
            }
        }
    }

    /// Laplace approximation of the negative log marginal likelihood with
    /// `β` integrated out.
    pub fn laplace_marginal_nll(&self, alpha: &[f64], log_lambda: &[f64]) -> Result<f64> {
        Ok(self.laplace_aux(alpha, log_lambda, &self.aux, None)?.0)
    }

    pub fn laplace_aux(
        &self,
        alpha: &[f64],
        log_lambda: &[f64],
        aux: &AuxValues,
        beta0: Option<&[f64]>,
    ) -> Result<(f64, InnerMode)> {
        let mode = self.inner_mode_aux(alpha, log_lambda, aux, beta0)?;
        Ok((mode.laplace_value(), mode))
    }

    /// Moment-based starting values for the fixed effects (intercepts only)
    /// and for ζ.
    pub fn initial_values(&self) -> (Vec<f64>, f64) {
        let init = moment_start(self.spec.family, &self.engine, &self.aux);
        let mut alpha = vec![0.0; self.p_fe()];
        for (k, pd) in self.design.params.iter().enumerate() {
            let theta = init.theta[k];
            let eta = match pd.terms.link {
                Link::Identity => theta,
                Link::Log => theta.max(1e-8).ln(),
            };
            alpha[pd.fe_offset] = eta;
        }
        (alpha, init.zeta)
    }
}

/// Newton direction `-H⁻¹ g`, adding a Levenberg shift when `H` is not
/// positive definite.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    let mut shift = 0.0;
    let scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for _ in 0..60 {
        let mut m = h.clone();
        for i in 0..n {
            m[(i, i)] += shift;
        }
        if let Some(c) = m.cholesky() {
            return -c.solve(g);
        }
        shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
    }
    -g.clone()
}

fn check_not_constant(engine: &Engine, names: &[String]) -> Result<()> {
    for (col, name) in engine.responses().iter().zip(names) {
        let mut vals = col.iter().flatten();
        if let Some(first) = vals.next() {
            if vals.all(|v| v == first) {
                return Err(Error::DegenerateData(format!("response '{name}' is constant")));
            }
        } else {
            return Err(Error::DegenerateData(format!("response '{name}' has no observations")));
        }
    }
    Ok(())
}

struct MomentStart {
    theta: [f64; 2],
    zeta: f64,
}

fn moment_start(family: SdeFamily, engine: &Engine, aux: &AuxValues) -> MomentStart {
    let times = engine.times();
    // observed consecutive pairs (z_i, z_j, Δ) within series
    let mut pairs = Vec::new();
    let mut all = Vec::new();
    for col in engine.responses() {
        for rows in engine.series() {
            let mut last: Option<(f64, f64)> = None;
            for i in rows.clone() {
                if let Some(z) = col[i] {
                    let z = if family == SdeFamily::Gbm { z.ln() } else { z };
                    all.push(z);
                    if let Some((t0, z0)) = last {
                        pairs.push((z0, z, times[i] - t0));
                    }
                    last = Some((times[i], z));
                }
            }
        }
    }
    let total_dt: f64 = pairs.iter().map(|p| p.2).sum::<f64>().max(1e-300);
    let mean_dt = total_dt / pairs.len().max(1) as f64;
    let drift = pairs.iter().map(|p| p.1 - p.0).sum::<f64>() / total_dt;
    let euler_var = pairs
        .iter()
        .map(|&(a, b, dt)| (b - a - drift * dt).powi(2) / dt)
        .sum::<f64>()
        / pairs.len().max(1) as f64;
    let sd = euler_var.sqrt().max(1e-6);
    match family {
        SdeFamily::BmDrift => MomentStart { theta: [drift, sd], zeta: aux.zeta },
        SdeFamily::Gbm => MomentStart {
            theta: [drift + 0.5 * euler_var, sd],
            zeta: aux.zeta,
        },
        SdeFamily::TIncrement => MomentStart {
            theta: [drift, sd * ((aux.nu - 2.0) / aux.nu).sqrt()],
            zeta: aux.zeta,
        },
        SdeFamily::Ou => {
            let zeta = all.iter().sum::<f64>() / all.len().max(1) as f64;
            let num: f64 = pairs.iter().map(|&(a, b, _)| (a - zeta) * (b - zeta)).sum();
            let den: f64 = pairs.iter().map(|&(a, _, _)| (a - zeta).powi(2)).sum();
            let phi = (num / den.max(1e-300)).clamp(0.01, 0.999);
            let r = -phi.ln() / mean_dt;
            let var = all.iter().map(|z| (z - zeta).powi(2)).sum::<f64>() / all.len().max(1) as f64;
            MomentStart {
                theta: [r, (2.0 * r * var).sqrt().max(1e-6)],
                zeta,
            }
        }
        SdeFamily::Ctcrw => {
            // velocity proxies from finite differences
            let v: Vec<(f64, f64)> = pairs.iter().map(|&(a, b, dt)| ((b - a) / dt, dt)).collect();
            let var_v = v.iter().map(|x| x.0 * x.0).sum::<f64>() / v.len().max(1) as f64;
            let mut num = 0.0;
            let mut den = 0.0;
            for w in v.windows(2) {
                num += w[0].0 * w[1].0;
                den += w[0].0 * w[0].0;
            }
            let rho = (num / den.max(1e-300)).clamp(0.05, 0.99);
            let r = -rho.ln() / mean_dt;
            MomentStart {
                theta: [r, (2.0 * r * var_v).sqrt().max(1e-6)],
                zeta: 0.0,
            }
        }
    }
}
