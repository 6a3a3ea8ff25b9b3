use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use super::family::{AuxValues, SdeFamily};
use crate::error::{Error, Result};
use crate::kalman::ctcrw_step_matrices;

pub type SimRng = ChaCha20Rng;

/// Parameter values held constant over each simulation step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ThetaGrid {
    pub r: Vec<f64>,
    pub s: Vec<f64>,
}

impl ThetaGrid {
    pub fn constant(r: f64, s: f64, steps: usize) -> Self {
        Self {
            r: vec![r; steps],
            s: vec![s; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.r.len()
    }
}

/// Simulated path. For CTCRW `values` are positions and `velocity` holds
/// the latent velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub velocity: Option<Vec<f64>>,
}

fn validate(family: SdeFamily, theta: &ThetaGrid, dt: f64, z0: f64, aux: &AuxValues) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("simulation step must be positive, got {dt}")));
    }
    if theta.r.len() != theta.s.len() {
        return Err(Error::Dimension("r and s grids differ in length".into()));
    }
    if !z0.is_finite() {
        return Err(Error::Domain("initial value must be finite".into()));
    }
    if family == SdeFamily::Gbm && !(z0 > 0.0) {
        return Err(Error::Domain(format!("GBM requires z0 > 0, got {z0}")));
    }
    family.validate_aux(aux)?;
    for (i, (&r, &s)) in theta.r.iter().zip(&theta.s).enumerate() {
        if !r.is_finite() || !s.is_finite() || s < 0.0 {
            return Err(Error::Domain(format!("invalid parameters at step {i}: r = {r}, s = {s}")));
        }
        if matches!(family, SdeFamily::Ou | SdeFamily::Ctcrw) && !(r > 0.0) {
            return Err(Error::Domain(format!("r must be positive at step {i}, got {r}")));
        }
    }
    Ok(())
}

pub fn simulate_path(
    family: SdeFamily,
    theta: &ThetaGrid,
    dt: f64,
    z0: f64,
    aux: &AuxValues,
    seed: u64,
) -> Result<Path> {
    let mut rng = SimRng::seed_from_u64(seed);
    simulate_path_with(family, theta, dt, z0, aux, &mut rng)
}

/// Forward simulation on a regular grid of step `dt`, using exact
/// transitions for BM, GBM, OU and CTCRW.
pub fn simulate_path_with<G: Rng + ?Sized>(
    family: SdeFamily,
    theta: &ThetaGrid,
    dt: f64,
    z0: f64,
    aux: &AuxValues,
    rng: &mut G,
) -> Result<Path> {
    validate(family, theta, dt, z0, aux)?;
    let n = theta.steps();
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
    let mut values = Vec::with_capacity(n + 1);
    values.push(z0);
    let sqdt = dt.sqrt();
    let mut z = z0;
    let mut velocity = None;
    match family {
        SdeFamily::BmDrift => {
            for (&r, &s) in theta.r.iter().zip(&theta.s) {
                let e: f64 = StandardNormal.sample(rng);
                z += r * dt + s * sqdt * e;
                values.push(z);
            }
        }
        SdeFamily::Gbm => {
            let mut lz = z0.ln();
            for (&r, &s) in theta.r.iter().zip(&theta.s) {
                let e: f64 = StandardNormal.sample(rng);
                lz += (r - 0.5 * s * s) * dt + s * sqdt * e;
                values.push(lz.exp());
            }
        }
        SdeFamily::Ou => {
            for (&r, &s) in theta.r.iter().zip(&theta.s) {
                let e: f64 = StandardNormal.sample(rng);
                let decay = (-r * dt).exp();
                let var = s * s / (2.0 * r) * -(-2.0 * r * dt).exp_m1();
                z = aux.zeta + decay * (z - aux.zeta) + var.sqrt() * e;
                values.push(z);
            }
        }
        SdeFamily::TIncrement => {
            let t = StudentT::new(aux.nu).map_err(|e| Error::Domain(e.to_string()))?;
            for (&r, &s) in theta.r.iter().zip(&theta.s) {
                z += r * dt + s * sqdt * t.sample(rng);
                values.push(z);
            }
        }
        SdeFamily::Ctcrw => {
            let mut vel = Vec::with_capacity(n + 1);
            let mut v = match (theta.r.first(), theta.s.first()) {
                (Some(&r), Some(&s)) => {
                    let e: f64 = StandardNormal.sample(rng);
                    s / (2.0 * r).sqrt() * e
                }
                _ => 0.0,
            };
            vel.push(v);
            for (&r, &s) in theta.r.iter().zip(&theta.s) {
                let (t, q) = ctcrw_step_matrices(dt, r, s)?;
                let l11 = q[(0, 0)].max(0.0).sqrt();
                let (l21, l22) = if l11 > 0.0 {
                    let l21 = q[(1, 0)] / l11;
                    (l21, (q[(1, 1)] - l21 * l21).max(0.0).sqrt())
                } else {
                    (0.0, q[(1, 1)].max(0.0).sqrt())
                };
                let e1: f64 = StandardNormal.sample(rng);
                let e2: f64 = StandardNormal.sample(rng);
                let zn = z + t[(0, 1)] * v + l11 * e1;
                v = t[(1, 1)] * v + l21 * e1 + l22 * e2;
                z = zn;
                values.push(z);
                vel.push(v);
            }
            velocity = Some(vel);
        }
    }
    Ok(Path {
        times,
        values,
        velocity,
    })
}
