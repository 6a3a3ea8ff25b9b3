//! Transition log-densities with parameters held constant over each interval.

use statrs::function::gamma::ln_gamma;

use super::family::{AuxValues, SdeFamily};
use crate::autodiff::Real;
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub(crate) fn normal_logpdf<R: Real>(x: R, mean: R, var: R) -> R {
    let d = x - mean;
    -(var.ln() * 0.5) - d * d / (var * 2.0) - HALF_LN_2PI
}

/// `log φ(z_to; z_from + rΔ, s²Δ)`.
pub fn logdens_bm(z_from: f64, z_to: f64, dt: f64, r: f64, s: f64) -> f64 {
    bm_generic(z_from, z_to, dt, r, s)
}

pub(crate) fn bm_generic<R: Real>(z_from: f64, z_to: f64, dt: f64, r: R, s: R) -> R {
    normal_logpdf(R::cst(z_to), r * dt + z_from, s * s * dt)
}

/// Lognormal transition of geometric Brownian motion.
pub fn logdens_gbm(z_from: f64, z_to: f64, dt: f64, r: f64, s: f64) -> Result<f64> {
    if !(z_from > 0.0 && z_to > 0.0) {
        return Err(Error::Domain(format!(
            "geometric Brownian motion requires positive states, got {z_from} -> {z_to}"
        )));
    }
    check_positive("dt", dt)?;
    check_positive("s", s)?;
    Ok(gbm_generic(z_from, z_to, dt, r, s))
}

pub(crate) fn gbm_generic<R: Real>(z_from: f64, z_to: f64, dt: f64, r: R, s: R) -> R {
    let drift = r - s * s * 0.5;
    bm_generic(z_from.ln(), z_to.ln(), dt, drift, s) - z_to.ln()
}

/// Conditional mean and variance of the OU transition.
pub fn ou_moments(z_from: f64, dt: f64, r: f64, s: f64, zeta: f64) -> (f64, f64) {
    let decay = (-r * dt).exp();
    let var = s * s / (2.0 * r) * -(-2.0 * r * dt).exp_m1();
    (zeta + decay * (z_from - zeta), var)
}

/// Exact Ornstein–Uhlenbeck transition log-density.
pub fn logdens_ou(z_from: f64, z_to: f64, dt: f64, r: f64, s: f64, zeta: f64) -> Result<f64> {
    check_positive("r", r)?;
    check_positive("s", s)?;
    check_positive("dt", dt)?;
    Ok(ou_generic(z_from, z_to, dt, r, s, zeta))
}

pub(crate) fn ou_generic<R: Real>(z_from: f64, z_to: f64, dt: f64, r: R, s: R, zeta: f64) -> R {
    let decay = (r * -dt).exp();
    let mean = decay * (z_from - zeta) + zeta;
    let var = s * s / (r * 2.0) * -((r * (-2.0 * dt)).exp_m1());
    normal_logpdf(R::cst(z_to), mean, var)
}

/// Euler–Maruyama transition: `log φ(z_to; z_from + μΔ, σ²Δ)`.
pub fn logdens_euler(z_from: f64, z_to: f64, dt: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_positive("sigma", sigma)?;
    check_positive("dt", dt)?;
    Ok(normal_logpdf(z_to, z_from + mu * dt, sigma * sigma * dt))
}

/// Log of the Student-t density normalizing constant.
pub(crate) fn t_log_norm(nu: f64) -> f64 {
    if nu > 200.0 {
        // ln Γ(x + ½) - ln Γ(x) = ½ ln x - 1/(8x) + 1/(192x³) + 1/(640x⁵) - …
        let x = 0.5 * nu;
        let (x2, x3) = (x * x, x * x * x);
        return -0.5 * (2.0 * std::f64::consts::PI).ln() - 1.0 / (8.0 * x) + 1.0 / (192.0 * x3)
            + 1.0 / (640.0 * x3 * x2);
    }
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln()
}

/// Heavy-tailed increment model: standardized increment is `t(ν)`, with the
/// Jacobian `1 / (s̃ √Δ)`.
pub fn logdens_t_increment(
    z_from: f64,
    z_to: f64,
    dt: f64,
    r: f64,
    s_tilde: f64,
    nu: f64,
) -> Result<f64> {
    check_nu(nu)?;
    check_positive("s_tilde", s_tilde)?;
    check_positive("dt", dt)?;
    Ok(t_generic(z_from, z_to, dt, r, s_tilde, nu, t_log_norm(nu)))
}

pub(crate) fn t_generic<R: Real>(
    z_from: f64,
    z_to: f64,
    dt: f64,
    r: R,
    s_tilde: R,
    nu: f64,
    log_norm: f64,
) -> R {
    let scale = s_tilde * dt.sqrt();
    let x = (-(r * dt) + (z_to - z_from)) / scale;
    -((x * x / nu).ln_1p() * (0.5 * (nu + 1.0))) - scale.ln() + log_norm
}

/// Standard deviation of a t-increment with unit time step: `s̃ √(ν/(ν-2))`.
pub fn sd_from_scale(s_tilde: f64, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    check_positive("s_tilde", s_tilde)?;
    Ok(s_tilde * (nu / (nu - 2.0)).sqrt())
}

/// Speed of movement of the velocity-OU model, `√π s / (2 √r)`.
pub fn derived_speed_nu(r: f64, s: f64) -> Result<f64> {
    check_positive("r", r)?;
    check_positive("s", s)?;
    Ok(std::f64::consts::PI.sqrt() * s / (2.0 * r.sqrt()))
}

/// Transition log-density of a directly observed family, generic over the
/// scalar type of the parameters (already on the natural scale).
pub(crate) fn direct_logdens<R: Real>(
    family: SdeFamily,
    z_from: f64,
    z_to: f64,
    dt: f64,
    r: R,
    s: R,
    aux: &AuxValues,
    t_norm: f64,
) -> R {
    match family {
        SdeFamily::BmDrift => bm_generic(z_from, z_to, dt, r, s),
        SdeFamily::Gbm => gbm_generic(z_from, z_to, dt, r, s),
        SdeFamily::Ou => ou_generic(z_from, z_to, dt, r, s, aux.zeta),
        SdeFamily::TIncrement => t_generic(z_from, z_to, dt, r, s, aux.nu, t_norm),
        SdeFamily::Ctcrw => unreachable!("CTCRW is evaluated by the Kalman filter"),
    }
}

/// Transition log-density for any directly observed family with parameters
/// on the natural scale.
pub fn transition_logdens(
    family: SdeFamily,
    z_from: f64,
    z_to: f64,
    dt: f64,
    r: f64,
    s: f64,
    aux: &AuxValues,
) -> Result<f64> {
    match family {
        SdeFamily::BmDrift => Ok(logdens_bm(z_from, z_to, dt, r, s)),
        SdeFamily::Gbm => logdens_gbm(z_from, z_to, dt, r, s),
        SdeFamily::Ou => logdens_ou(z_from, z_to, dt, r, s, aux.zeta),
        SdeFamily::TIncrement => logdens_t_increment(z_from, z_to, dt, r, s, aux.nu),
        SdeFamily::Ctcrw => Err(Error::UnsupportedFamily(
            "CTCRW has no direct transition density; positions are filtered".into(),
        )),
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive, got {v}")))
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 2.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "degrees of freedom must exceed 2, got {nu}"
        )))
    }
}
