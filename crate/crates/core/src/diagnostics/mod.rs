//! Standardized residuals, QQ and autocorrelation summaries, a
//! Kolmogorov–Smirnov test, and the replicate studies used to check interval
//! coverage and curve recovery.

pub mod study;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::FitResult;
use crate::sde::{Reference, SdeFamily};

pub use study::{
    coverage_experiment, replicate_study, CoverageReport, ParamCoverage, ParamRecovery, RecoveryReport,
    ReplicateFailure, StudyOptions, StudyReport,
};

/// Minimum number of residuals for a QQ table.
pub const MIN_QQ_POINTS: usize = 10;

/// Per-transition standardized residuals of a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub reference: Reference,
    /// Series of each residual (suffixed with the response name when a model
    /// has several responses).
    pub ids: Vec<String>,
    /// Time at the start of each transition.
    pub times: Vec<f64>,
    /// Transition index within its series, starting at 1.
    pub index: Vec<usize>,
    pub values: Vec<f64>,
}

impl ResidualSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        reference_cdf(self.reference, x)
    }

    pub fn ks_test(&self) -> KsResult {
        ks_test(&self.values, |x| self.cdf(x))
    }
}

fn reference_cdf(r: Reference, x: f64) -> f64 {
    match r {
        Reference::StandardNormal => Normal::standard().cdf(x),
        Reference::StudentT { nu } => StudentsT::new(0.0, 1.0, nu).map_or(f64::NAN, |d| d.cdf(x)),
    }
}

fn reference_quantile(r: Reference, p: f64) -> f64 {
    match r {
        Reference::StandardNormal => Normal::standard().inverse_cdf(p),
        Reference::StudentT { nu } => StudentsT::new(0.0, 1.0, nu).map_or(f64::NAN, |d| d.inverse_cdf(p)),
    }
}

/// Euler-form residuals `(z_{i+1} - z_i - μ Δ) / (σ √Δ)` with drift and
/// diffusion evaluated at the fitted parameters of the start of each
/// interval. GBM is standardized on the log scale; t-increment residuals
/// are scaled by `s̃` and follow `t(ν)`.
pub fn residuals(fit: &FitResult, data: &Dataset) -> Result<ResidualSeries> {
    let family = fit.family;
    if family.is_latent() {
        return Err(Error::UnsupportedFamily(
            "residuals unsupported for latent-state families".into(),
        ));
    }
    let theta = fit.theta(data)?;
    let (r, s) = (&theta[0], &theta[1]);
    let responses = fit.spec.response_names();
    let times = data.times();
    let mut out = ResidualSeries {
        reference: family.reference(&fit.aux),
        ids: Vec::new(),
        times: Vec::new(),
        index: Vec::new(),
        values: Vec::new(),
    };
    for name in &responses {
        let col = data.response(name)?;
        for series in data.series() {
            let id = if responses.len() > 1 {
                format!("{}:{name}", series.id)
            } else {
                series.id.clone()
            };
            for (k, i) in series.rows().take(series.len().saturating_sub(1)).enumerate() {
                let (Some(z0), Some(z1)) = (col[i], col[i + 1]) else {
                    return Err(Error::Data(format!("missing response '{name}' at row {}", i + 1)));
                };
                let dt = times[i + 1] - times[i];
                let (from, to, mu, sigma) = match family {
                    SdeFamily::BmDrift | SdeFamily::TIncrement => (z0, z1, r[i], s[i]),
                    SdeFamily::Gbm => (z0.ln(), z1.ln(), r[i] - 0.5 * s[i] * s[i], s[i]),
                    SdeFamily::Ou => (z0, z1, r[i] * (fit.aux.zeta - z0), s[i]),
                    SdeFamily::Ctcrw => unreachable!(),
                };
                let e = (to - from - mu * dt) / (sigma * dt.sqrt());
                if !e.is_finite() {
                    return Err(Error::Domain(format!("non-finite residual at row {}", i + 1)));
                }
                out.ids.push(id.clone());
                out.times.push(times[i]);
                out.index.push(k + 1);
                out.values.push(e);
            }
        }
    }
    Ok(out)
}

/// Sorted residuals against reference quantiles at `(i - 0.5) / n`, as
/// `(theoretical, empirical)` pairs.
pub fn qq_points(res: &ResidualSeries) -> Result<Vec<(f64, f64)>> {
    let n = res.len();
    if n < MIN_QQ_POINTS {
        return Err(Error::Dimension(format!(
            "QQ table needs at least {MIN_QQ_POINTS} residuals, got {n}"
        )));
    }
    let mut sorted = res.values.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, e)| (reference_quantile(res.reference, (i as f64 + 0.5) / n as f64), e))
        .collect())
}

/// Sample autocorrelation with its white-noise reference bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acf {
    /// Autocorrelation at lags `0..=max_lag`.
    pub values: Vec<f64>,
    /// `1.96 / √n`.
    pub bound: f64,
}

pub fn acf(values: &[f64], max_lag: usize) -> Result<Acf> {
    let n = values.len();
    if max_lag >= n {
        return Err(Error::Dimension(format!(
            "max_lag = {max_lag} must be less than the series length {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    let values = (0..=max_lag)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / c0
            }
        })
        .collect();
    Ok(Acf {
        values,
        bound: 1.96 / (n as f64).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF, with the
/// asymptotic p-value under Stephens' small-sample correction.
pub fn ks_test(values: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let n = values.len();
    if n == 0 {
        return KsResult {
            statistic: f64::NAN,
            p_value: f64::NAN,
        };
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0f64, f64::max);
    let sq = nf.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_q((sq + 0.12 + 0.11 / sq) * d),
    }
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acf_lag_zero_and_shift_invariance() {
        let v: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64).collect();
        let a = acf(&v, 5).unwrap();
        assert_eq!(a.values[0], 1.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + 100.0).collect();
        let b = acf(&shifted, 5).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!(matches!(acf(&v, 50), Err(Error::Dimension(_))));
    }

    #[test]
    fn kolmogorov_tail_values() {
        // classical critical values of the limiting distribution
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_q(1.6276) - 0.01).abs() < 1e-3);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn ks_statistic_of_exact_quantiles() {
        let n = 200;
        let v: Vec<f64> = (0..n)
            .map(|i| Normal::standard().inverse_cdf((i as f64 + 0.5) / n as f64))
            .collect();
        let r = ks_test(&v, |x| Normal::standard().cdf(x));
        assert!((r.statistic - 0.5 / n as f64).abs() < 1e-9);
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn qq_on_exact_quantiles_is_diagonal() {
        for reference in [Reference::StandardNormal, Reference::StudentT { nu: 3.0 }] {
            let n = 101;
            let values: Vec<f64> = (0..n)
                .rev()
                .map(|i| reference_quantile(reference, (i as f64 + 0.5) / n as f64))
                .collect();
            let res = ResidualSeries {
                reference,
                ids: vec!["1".into(); n],
                times: (0..n).map(|i| i as f64).collect(),
                index: (1..=n).collect(),
                values,
            };
            let qq = qq_points(&res).unwrap();
            for (t, e) in &qq {
                assert!((t - e).abs() < 1e-12);
            }
            assert!(qq[50].0.abs() < 1e-9);
        }
    }
}
