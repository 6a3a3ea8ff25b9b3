//! Box-constrained BFGS for the outer (fixed effects, log λ) problem.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

pub(crate) trait OuterProblem {
    fn value(&mut self, x: &[f64]) -> Result<f64>;
    /// Gradient at an accepted point `x` with value `fx`.
    fn gradient(&mut self, x: &[f64], fx: f64) -> Result<Vec<f64>>;
    /// Diagonal second derivatives at the last gradient point, if the
    /// gradient computation produced them.
    fn curvature(&self) -> Option<Vec<f64>> {
        None
    }
}

/// Initial inverse Hessian: reciprocal of the available positive diagonal
/// curvatures, identity elsewhere.
fn initial_inverse(n: usize, curv: Option<Vec<f64>>) -> (DMatrix<f64>, bool) {
    match curv {
        Some(c) if c.len() == n => {
            let d = DVector::from_iterator(n, c.iter().map(|&v| if v > 0.0 && v.is_finite() { 1.0 / v } else { 1.0 }));
            (DMatrix::from_diagonal(&d), false)
        }
        _ => (DMatrix::identity(n, n), true),
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BfgsOptions {
    pub rel_tol: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_step: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct BfgsOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub trace: Vec<f64>,
}

fn project(x: &mut [f64], opts: &BfgsOptions) {
    for ((v, &lo), &hi) in x.iter_mut().zip(&opts.lower).zip(&opts.upper) {
        *v = v.clamp(lo, hi);
    }
}

/// Gradient with components zeroed where a bound blocks descent.
fn projected(x: &[f64], g: &[f64], opts: &BfgsOptions) -> Vec<f64> {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&xi, &gi))| {
            let at_lo = xi <= opts.lower[i] && gi > 0.0;
            let at_hi = xi >= opts.upper[i] && gi < 0.0;
            if at_lo || at_hi {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

pub(crate) fn minimize<P: OuterProblem>(problem: &mut P, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsOutcome> {
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, opts);
    let mut f = problem.value(&x)?;
    let mut trace = vec![f];
    if n == 0 {
        return Ok(BfgsOutcome {
            x,
            iterations: 0,
            converged: true,
            grad_norm: 0.0,
            trace,
        });
    }
    let mut g = problem.gradient(&x, f)?;
    let (mut hinv, mut fresh) = initial_inverse(n, problem.curvature());
    let mut converged = false;
    let mut small_changes = 0;
    // set after a failed line search from a freshly reset inverse Hessian
    let mut reset = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let pg = projected(&x, &g, opts);
        let gnorm = pg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm <= opts.grad_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;
        let pgv = DVector::from_column_slice(&pg);
        let mut d = -(&hinv * &pgv);
        for i in 0..n {
            if pg[i] == 0.0 && g[i] != 0.0 {
                d[i] = 0.0;
            }
        }
        if d.dot(&pgv) >= 0.0 {
            (hinv, fresh) = initial_inverse(n, problem.curvature());
            d = -(&hinv * &pgv);
        }
        let dmax = d.amax();
        if dmax > opts.max_step {
            d *= opts.max_step / dmax;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            project(&mut trial, opts);
            let dec: f64 = trial.iter().zip(&x).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
            if let Ok(ft) = problem.value(&trial) {
                if ft.is_finite() && ft <= f + 1e-4 * dec.min(0.0) {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if !reset {
                (hinv, fresh) = initial_inverse(n, problem.curvature());
                reset = true;
                continue;
            }
            // no descent possible along the gradient: stationary to within
            // the accuracy of the objective
            converged = gnorm <= 1e3 * opts.grad_tol * (1.0 + f.abs());
            break;
        };
        reset = false;
        let gn = problem.gradient(&xn, fnew)?;
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let change = (f - fnew).abs() / f.abs().max(1.0);
        x = xn;
        f = fnew;
        g = gn;
        trace.push(f);
        if change < opts.rel_tol {
            small_changes += 1;
            if small_changes >= 2 {
                converged = true;
                break;
            }
        } else {
            small_changes = 0;
        }
    }
    let pg = projected(&x, &g, opts);
    Ok(BfgsOutcome {
        x,
        iterations,
        converged,
        grad_norm: pg.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        trace,
    })
}
