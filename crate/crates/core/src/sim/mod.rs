//! Simulation scenarios with covariate-driven parameters: a Brownian
//! covariate, a fine-grid path whose parameters follow the covariate, and
//! random thinning to irregular observation times.

pub mod expr;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{FormulaTerm, ParamFormula};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::ModelSpec;
use crate::sde::{simulate_path_with, AuxValues, Path, SdeFamily, SimRng, ThetaGrid};

pub use expr::Expr;

/// Name of the simulated covariate column.
pub const COVARIATE: &str = "x1";

/// True parameter function of the covariate: a constant, a closed-form
/// expression in `x`, or a piecewise-linear table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurveSpec {
    Constant(f64),
    Expr(String),
    Table { x: Vec<f64>, y: Vec<f64> },
}

/// Compiled curve.
#[derive(Clone, Debug, PartialEq)]
pub enum Curve {
    Constant(f64),
    Expr(Expr),
    Table { x: Vec<f64>, y: Vec<f64> },
}

impl CurveSpec {
    pub fn compile(&self) -> Result<Curve> {
        match self {
            CurveSpec::Constant(c) if c.is_finite() => Ok(Curve::Constant(*c)),
            CurveSpec::Constant(c) => Err(Error::Config(format!("curve constant must be finite, got {c}"))),
            CurveSpec::Expr(s) => Ok(Curve::Expr(Expr::parse(s)?)),
            CurveSpec::Table { x, y } => {
                if x.is_empty() || x.len() != y.len() {
                    return Err(Error::Config(format!(
                        "curve table needs matching non-empty x and y (got {} and {})",
                        x.len(),
                        y.len()
                    )));
                }
                if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().chain(y).any(|v| !v.is_finite()) {
                    return Err(Error::Config("curve table x must be finite and strictly increasing".into()));
                }
                Ok(Curve::Table {
                    x: x.clone(),
                    y: y.clone(),
                })
            }
        }
    }
}

impl Curve {
    /// Value at `x`; tables interpolate linearly and are flat beyond their
    /// ends.
    pub fn eval(&self, at: f64) -> f64 {
        match self {
            Curve::Constant(c) => *c,
            Curve::Expr(e) => e.eval(at),
            Curve::Table { x, y } => {
                let k = x.partition_point(|&v| v <= at);
                if k == 0 {
                    y[0]
                } else if k == x.len() {
                    y[k - 1]
                } else {
                    let w = (at - x[k - 1]) / (x[k] - x[k - 1]);
                    y[k - 1] + w * (y[k] - y[k - 1])
                }
            }
        }
    }

    pub fn eval_many(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioKind {
    /// Brownian motion with drift `r(x)` and diffusion `s(x)`.
    BmCovariate,
    /// Integrated OU velocity with reversion `r(x)` and velocity diffusion
    /// `s(x)`; two position coordinates observed.
    CtcrwCovariate,
}

impl ScenarioKind {
    pub fn family(self) -> SdeFamily {
        match self {
            ScenarioKind::BmCovariate => SdeFamily::BmDrift,
            ScenarioKind::CtcrwCovariate => SdeFamily::Ctcrw,
        }
    }

    pub fn responses(self) -> &'static [&'static str] {
        match self {
            ScenarioKind::BmCovariate => &["z"],
            ScenarioKind::CtcrwCovariate => &["x", "y"],
        }
    }

    pub fn default_curves(self) -> (CurveSpec, CurveSpec) {
        match self {
            ScenarioKind::BmCovariate => (
                CurveSpec::Expr("exp(-x)*sin(6*x)".into()),
                CurveSpec::Expr("0.6 + 0.8*exp(-(x - 0.5)^2/0.08)".into()),
            ),
            ScenarioKind::CtcrwCovariate => (
                CurveSpec::Expr("1 + 0.8*sin(2*pi*x)".into()),
                CurveSpec::Expr("1 + 0.5*cos(pi*x)".into()),
            ),
        }
    }
}

fn default_dt() -> f64 {
    0.01
}
fn default_fine_length() -> usize {
    100_000
}
fn default_n_keep() -> usize {
    2000
}
fn default_k() -> usize {
    10
}
fn default_grid_size() -> usize {
    100
}

/// Simulation scenario. Missing curves take the scenario defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub r: Option<CurveSpec>,
    #[serde(default)]
    pub s: Option<CurveSpec>,
    /// Step of the fine simulation grid.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Number of fine-grid points.
    #[serde(default = "default_fine_length")]
    pub fine_length: usize,
    /// Observations kept after thinning.
    #[serde(default = "default_n_keep")]
    pub n_keep: usize,
    #[serde(default)]
    pub seed: u64,
    /// Basis size of the fitted smooths.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Points of the covariate grid used for scoring.
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
}

impl ScenarioConfig {
    pub fn new(scenario: ScenarioKind, seed: u64) -> Self {
        Self {
            scenario,
            r: None,
            s: None,
            dt: default_dt(),
            fine_length: default_fine_length(),
            n_keep: default_n_keep(),
            seed,
            k: default_k(),
            grid_size: default_grid_size(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.fine_length < 2 {
            return Err(Error::Config("fine_length must be at least 2".into()));
        }
        if self.n_keep < 2 || self.n_keep > self.fine_length {
            return Err(Error::Config(format!(
                "n_keep must lie in [2, fine_length = {}], got {}",
                self.fine_length, self.n_keep
            )));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        self.curves()?;
        Ok(())
    }

    pub fn curves(&self) -> Result<(Curve, Curve)> {
        let (dr, ds) = self.scenario.default_curves();
        Ok((
            self.r.as_ref().unwrap_or(&dr).compile()?,
            self.s.as_ref().unwrap_or(&ds).compile()?,
        ))
    }

    /// Model fitted to the scenario: both parameters smooth in the covariate.
    pub fn model_spec(&self) -> ModelSpec {
        let f = |p: &str| ParamFormula::new(p, vec![FormulaTerm::smooth(COVARIATE, self.k)]);
        ModelSpec::new(self.scenario.family(), self.scenario.responses(), vec![f("r"), f("s")])
    }

    /// Evenly spaced scoring grid over the covariate range `[0, 1]`.
    pub fn grid(&self) -> Vec<f64> {
        let m = self.grid_size - 1;
        (0..=m).map(|i| i as f64 / m as f64).collect()
    }
}

/// Brownian path of `n` points with step `dt`, started at 0.
pub fn brownian_path<G: Rng + ?Sized>(n: usize, dt: f64, rng: &mut G) -> Vec<f64> {
    let sd = dt.sqrt();
    let mut out = Vec::with_capacity(n);
    let mut x = 0.0;
    for i in 0..n {
        if i > 0 {
            let e: f64 = StandardNormal.sample(rng);
            x += sd * e;
        }
        out.push(x);
    }
    out
}

/// Min-max rescaling to `[0, 1]`.
pub fn rescale_unit(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    x.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Covariate as a driftless Brownian motion rescaled to `[0, 1]`.
pub fn simulate_covariate(n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = SimRng::seed_from_u64(seed);
    simulate_covariate_with(n, default_dt(), &mut rng)
}

pub fn simulate_covariate_with<G: Rng + ?Sized>(n: usize, dt: f64, rng: &mut G) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Dimension(format!("covariate needs at least 2 points, got {n}")));
    }
    Ok(rescale_unit(&brownian_path(n, dt, rng)))
}

/// Sorted indices of a uniform random subset of `0..len` of size `n_keep`
/// that always contains 0.
pub fn thin_indices<G: Rng + ?Sized>(len: usize, n_keep: usize, rng: &mut G) -> Result<Vec<usize>> {
    if n_keep < 2 {
        return Err(Error::Dimension(format!("must keep at least 2 points, got {n_keep}")));
    }
    if n_keep > len {
        return Err(Error::Dimension(format!("cannot keep {n_keep} of {len} points")));
    }
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, len - 1, n_keep - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    idx.sort_unstable();
    idx.insert(0, 0);
    Ok(idx)
}

fn select<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Random irregular sub-path; the first point is always kept.
pub fn thin_irregular(path: &Path, n_keep: usize, seed: u64) -> Result<Path> {
    let mut rng = SimRng::seed_from_u64(seed);
    let idx = thin_indices(path.times.len(), n_keep, &mut rng)?;
    Ok(Path {
        times: select(&path.times, &idx),
        values: select(&path.values, &idx),
        velocity: path.velocity.as_ref().map(|v| select(v, &idx)),
    })
}

/// Simulated scenario dataset with its true parameter curves.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub config: ScenarioConfig,
    pub data: Dataset,
    pub truth_r: Curve,
    pub truth_s: Curve,
}

impl ScenarioData {
    /// True `(r, s)` on the scoring grid.
    pub fn truth_on_grid(&self) -> (Vec<f64>, Vec<f64>) {
        let g = self.config.grid();
        (self.truth_r.eval_many(&g), self.truth_s.eval_many(&g))
    }
}

/// Simulate covariate and path on the fine grid, then thin. Fully
/// determined by the seed.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioData> {
    cfg.validate()?;
    let (cr, cs) = cfg.curves()?;
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let x1 = simulate_covariate_with(cfg.fine_length, cfg.dt, &mut rng)?;
    let steps = cfg.fine_length - 1;
    let theta = ThetaGrid {
        r: cr.eval_many(&x1[..steps]),
        s: cs.eval_many(&x1[..steps]),
    };
    let family = cfg.scenario.family();
    let aux = AuxValues::default();
    let paths = cfg
        .scenario
        .responses()
        .iter()
        .map(|_| simulate_path_with(family, &theta, cfg.dt, 0.0, &aux, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let idx = thin_indices(cfg.fine_length, cfg.n_keep, &mut rng)?;
    let n = idx.len();
    let responses = cfg
        .scenario
        .responses()
        .iter()
        .zip(&paths)
        .map(|(name, p)| (name.to_string(), select(&p.values, &idx).into_iter().map(Some).collect()))
        .collect();
    let data = Dataset::new(
        vec!["1".to_string(); n],
        select(&paths[0].times, &idx),
        responses,
        vec![(COVARIATE.to_string(), select(&x1, &idx))],
        vec![],
    )?;
    Ok(ScenarioData {
        config: cfg.clone(),
        data,
        truth_r: cr,
        truth_s: cs,
    })
}

/// Root-mean-square error divided by the range of the truth (plain RMSE
/// when the truth is constant).
pub fn normalized_rmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(Error::Dimension(format!(
            "estimate has {} points, truth has {}",
            estimate.len(),
            truth.len()
        )));
    }
    let mse = estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / truth.len() as f64;
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(if range > 0.0 { mse.sqrt() / range } else { mse.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ScenarioKind, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            fine_length: 5000,
            n_keep: 300,
            ..ScenarioConfig::new(kind, seed)
        }
    }

    #[test]
    fn covariate_spans_unit_interval() {
        for seed in 0..20 {
            let x = simulate_covariate(500, seed).unwrap();
            assert_eq!(x.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(x.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
        let mut x = simulate_covariate(2, 3).unwrap();
        x.sort_by(f64::total_cmp);
        assert_eq!(x, vec![0.0, 1.0]);
        assert!(simulate_covariate(1, 0).is_err());
    }

    #[test]
    fn brownian_increment_moments() {
        let (n, dt) = (200_000, 0.01);
        let mut rng = SimRng::seed_from_u64(11);
        let x = brownian_path(n, dt, &mut rng);
        let inc: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m = inc.len() as f64;
        let mean = inc.iter().sum::<f64>() / m;
        let var = inc.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
        assert!(mean.abs() < 5.0 * (dt / m).sqrt());
        assert!((var - dt).abs() < 5.0 * dt * (2.0 / m).sqrt());
    }

    #[test]
    fn thinning_keeps_first_and_sorts() {
        let path = Path {
            times: (0..1000).map(|i| i as f64 * 0.01).collect(),
            values: (0..1000).map(|i| i as f64).collect(),
            velocity: None,
        };
        for seed in 0..10 {
            let t = thin_irregular(&path, 100, seed).unwrap();
            assert_eq!(t.times.len(), 100);
            assert_eq!(t.times[0], 0.0);
            assert!(t.times.windows(2).all(|w| w[1] > w[0]));
        }
        assert_eq!(thin_irregular(&path, 1000, 1).unwrap(), path);
        assert!(thin_irregular(&path, 1, 1).is_err());
        assert!(thin_irregular(&path, 1001, 1).is_err());
    }

    #[test]
    fn thinned_spacing_mean() {
        let len = 100_000;
        let mut rng = SimRng::seed_from_u64(5);
        let idx = thin_indices(len, 2000, &mut rng).unwrap();
        let gaps: Vec<f64> = idx.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let span = (idx[idx.len() - 1] - idx[0]) as f64;
        assert!((mean - span / 1999.0).abs() < 1e-9);
        // expected spacing of uniform order statistics
        let expected = (len - 1) as f64 / 2000.0;
        assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn curve_specs() {
        let c: CurveSpec = serde_json::from_str("1.5").unwrap();
        assert_eq!(c.compile().unwrap().eval(0.3), 1.5);
        let c: CurveSpec = serde_json::from_str("\"x^2\"").unwrap();
        assert_eq!(c.compile().unwrap().eval(3.0), 9.0);
        let c: CurveSpec = serde_json::from_str(r#"{"x": [0, 1, 2], "y": [0, 10, 0]}"#).unwrap();
        let c = c.compile().unwrap();
        assert_eq!(c.eval_many(&[-1.0, 0.5, 1.0, 1.75, 5.0]), vec![0.0, 5.0, 10.0, 2.5, 0.0]);
        let bad = CurveSpec::Table {
            x: vec![0.0, 0.0],
            y: vec![1.0, 2.0],
        };
        assert!(bad.compile().is_err());
    }

    #[test]
    fn scenario_is_reproducible_and_shaped() {
        let a = run_scenario(&small(ScenarioKind::BmCovariate, 9)).unwrap();
        let b = run_scenario(&small(ScenarioKind::BmCovariate, 9)).unwrap();
        assert_eq!(a.data.times(), b.data.times());
        assert_eq!(a.data.response("z").unwrap(), b.data.response("z").unwrap());
        assert_eq!(a.data.n_rows(), 300);
        assert_eq!(a.data.times()[0], 0.0);
        let c = run_scenario(&small(ScenarioKind::CtcrwCovariate, 9)).unwrap();
        let mut names = c.data.response_names();
        names.sort();
        assert_eq!(names, vec!["x", "y"]);
        assert!(c.data.covariate(COVARIATE).is_ok());
    }

    #[test]
    fn constant_curves_match_constant_simulation() {
        let cfg = ScenarioConfig {
            r: Some(CurveSpec::Constant(0.5)),
            s: Some(CurveSpec::Constant(1.2)),
            fine_length: 100_001,
            n_keep: 100_001,
            ..ScenarioConfig::new(ScenarioKind::BmCovariate, 4)
        };
        let sc = run_scenario(&cfg).unwrap();
        let z: Vec<f64> = sc.data.response("z").unwrap().iter().map(|v| v.unwrap()).collect();
        let inc: Vec<f64> = z.windows(2).map(|w| w[1] - w[0]).collect();
        let m = inc.len() as f64;
        let mean = inc.iter().sum::<f64>() / m;
        let var = inc.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let v = 1.44 * 0.01;
        assert!((mean - 0.005).abs() < 5.0 * (v / m).sqrt());
        assert!((var - v).abs() < 5.0 * v * (2.0 / m).sqrt());
    }

    #[test]
    fn rmse_of_truth_is_zero() {
        let sc = run_scenario(&small(ScenarioKind::BmCovariate, 1)).unwrap();
        let (r, s) = sc.truth_on_grid();
        assert_eq!(normalized_rmse(&r, &r).unwrap(), 0.0);
        assert_eq!(normalized_rmse(&s, &s).unwrap(), 0.0);
        let shifted: Vec<f64> = r.iter().map(|v| v + 0.1).collect();
        let range = r.iter().copied().fold(f64::NEG_INFINITY, f64::max) - r.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((normalized_rmse(&shifted, &r).unwrap() - 0.1 / range).abs() < 1e-12);
    }
}
