//! Clamped B-spline bases with quantile knots and an exact second-derivative
//! roughness penalty.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum polynomial degree used for smooth terms.
pub const CUBIC: usize = 3;

/// A clamped B-spline basis on `[lower, upper]`, extended linearly outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    pub knots: Vec<f64>,
    pub degree: usize,
    pub lower: f64,
    pub upper: f64,
}

impl BSplineBasis {
    /// Basis with `num_basis` functions and interior knots at quantiles of `x`.
    /// The degree is cubic unless `num_basis` is too small to support it.
    pub fn from_quantiles(x: &[f64], num_basis: usize) -> Result<Self> {
        if num_basis < 3 {
            return Err(Error::Dimension(format!(
                "a smooth needs at least 3 basis functions, got {num_basis}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("covariate values must be finite".into()));
        }
        let lower = x.iter().copied().fold(f64::INFINITY, f64::min);
        let upper = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(upper > lower) {
            return Err(Error::DegenerateCovariate(String::new()));
        }
        let degree = CUBIC.min(num_basis - 1);
        let n_interior = num_basis - degree - 1;

        let mut sorted = x.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut interior: Vec<f64> = (1..=n_interior)
            .map(|j| quantile_sorted(&sorted, j as f64 / (n_interior + 1) as f64))
            .collect();
        let well_spaced = interior
            .iter()
            .zip(std::iter::once(&lower).chain(interior.iter()))
            .all(|(k, prev)| k > prev)
            && interior.last().is_none_or(|&k| k < upper);
        if !well_spaced {
            // heavy ties: fall back to equally spaced interior knots
            let h = (upper - lower) / (n_interior + 1) as f64;
            interior = (1..=n_interior).map(|j| lower + j as f64 * h).collect();
        }

        let mut knots = vec![lower; degree + 1];
        knots.extend(interior);
        knots.extend(std::iter::repeat_n(upper, degree + 1));
        Ok(Self {
            knots,
            degree,
            lower,
            upper,
        })
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    fn find_span(&self, x: f64) -> usize {
        let p = self.degree;
        let n = self.num_basis() - 1;
        if x >= self.knots[n + 1] {
            return n;
        }
        if x <= self.knots[p] {
            return p;
        }
        let (mut low, mut high) = (p, n + 1);
        let mut mid = (low + high) / 2;
        while x < self.knots[mid] || x >= self.knots[mid + 1] {
            if x < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
            mid = (low + high) / 2;
        }
        mid
    }

    /// Non-zero basis functions and their derivatives up to `n_der` at `x`
    /// inside the knot range. Returns the span index and `ders[k][j]`, the
    /// k-th derivative of basis function `span - degree + j`.
    fn ders_basis_funs(&self, x: f64, n_der: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.degree;
        let u = &self.knots;
        let span = self.find_span(x);
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; n_der + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=n_der.min(p) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=n_der.min(p) {
            for v in ders[k].iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        (span, ders)
    }

    /// All basis functions and their derivatives (order 0..=n_der) at `x`,
    /// with linear extension outside `[lower, upper]`.
    pub fn eval_derivs(&self, x: f64, n_der: usize) -> Vec<Vec<f64>> {
        let m = self.num_basis();
        let mut out = vec![vec![0.0; m]; n_der + 1];
        let (anchor, offset) = if x < self.lower {
            (self.lower, x - self.lower)
        } else if x > self.upper {
            (self.upper, x - self.upper)
        } else {
            (x, 0.0)
        };
        let (span, ders) = self.ders_basis_funs(anchor, n_der.max(1));
        let first = span - self.degree;
        for j in 0..=self.degree {
            let i = first + j;
            if offset == 0.0 {
                for k in 0..=n_der {
                    out[k][i] = ders[k][j];
                }
            } else {
                out[0][i] = ders[0][j] + offset * ders[1][j];
                if n_der >= 1 {
                    out[1][i] = ders[1][j];
                }
            }
        }
        out
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        self.eval_derivs(x, 0).swap_remove(0)
    }

    /// Basis matrix with one row per value of `x`.
    pub fn design(&self, x: &[f64]) -> DMatrix<f64> {
        let m = self.num_basis();
        let mut out = DMatrix::zeros(x.len(), m);
        for (i, &xi) in x.iter().enumerate() {
            for (j, v) in self.eval(xi).into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// `S[a][b] = ∫ B_a''(x) B_b''(x) dx` over `[lower, upper]`, integrated
    /// exactly with three-point Gauss–Legendre on each knot interval.
    pub fn second_derivative_penalty(&self) -> DMatrix<f64> {
        const NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
        const WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let m = self.num_basis();
        let mut s = DMatrix::zeros(m, m);
        for w in self.knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (node, weight) in NODES.iter().zip(WEIGHTS) {
                let x = mid + half * node;
                let d2 = &self.eval_derivs(x, 2)[2];
                for i in 0..m {
                    if d2[i] == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        s[(i, j)] += weight * half * d2[i] * d2[j];
                    }
                }
            }
        }
        s
    }
}

/// Linear-interpolation sample quantile of sorted data.
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
