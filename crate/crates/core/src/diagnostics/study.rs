//! Simulate–fit–predict replicate studies: pointwise interval coverage and
//! normalized RMSE of the fitted curves against the simulation truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::CovariateTable;
use crate::error::{Error, Result};
use crate::inference::{fit, posterior_samples, predict_with_draws};
use crate::sim::{normalized_rmse, run_scenario, ScenarioConfig, COVARIATE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyOptions {
    pub replicates: usize,
    /// Posterior draws per replicate for the bands.
    pub n_draws: usize,
    pub level: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            replicates: 200,
            n_draws: 1000,
            level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCoverage {
    pub param: String,
    /// Coverage averaged over the grid and the successful replicates.
    pub average: f64,
    /// Coverage at each grid point.
    pub by_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub level: f64,
    pub grid: Vec<f64>,
    pub params: Vec<ParamCoverage>,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecovery {
    pub param: String,
    pub median: f64,
    /// Normalized RMSE per successful replicate.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub params: Vec<ParamRecovery>,
}

/// Seed and failure reason of a replicate that did not produce a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub coverage: CoverageReport,
    pub recovery: RecoveryReport,
    pub failures: Vec<ReplicateFailure>,
}

struct Replicate {
    /// Per parameter, whether each grid point's band holds the truth.
    hits: Vec<Vec<bool>>,
    nrmse: Vec<f64>,
}

fn run_replicate(cfg: &ScenarioConfig, opts: &StudyOptions, grid: &CovariateTable) -> Result<Replicate> {
    let sc = run_scenario(cfg)?;
    let f = fit(&cfg.model_spec(), &sc.data)?;
    let draws = posterior_samples(&f, opts.n_draws, cfg.seed)?;
    let curves = predict_with_draws(&f, grid, &draws, opts.level)?;
    let (tr, ts) = sc.truth_on_grid();
    let mut hits = Vec::with_capacity(2);
    let mut nrmse = Vec::with_capacity(2);
    for (c, truth) in curves.iter().zip([&tr, &ts]) {
        hits.push(
            truth
                .iter()
                .enumerate()
                .map(|(i, &t)| c.lower[i] <= t && t <= c.upper[i])
                .collect(),
        );
        nrmse.push(normalized_rmse(&c.estimate, truth)?);
    }
    Ok(Replicate { hits, nrmse })
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Run `opts.replicates` independent replicates of a scenario in parallel.
/// Replicate `i` uses seed `cfg.seed + i`. Replicates whose simulation or fit
/// fails are recorded and left out of the summaries.
pub fn replicate_study(cfg: &ScenarioConfig, opts: &StudyOptions) -> Result<StudyReport> {
    cfg.validate()?;
    if opts.replicates == 0 {
        return Err(Error::Config("replicates must be positive".into()));
    }
    if opts.n_draws == 0 {
        return Err(Error::Config("n_draws must be positive".into()));
    }
    if !(0.0..=1.0).contains(&opts.level) {
        return Err(Error::Config(format!("level must lie in [0, 1], got {}", opts.level)));
    }
    let grid = cfg.grid();
    let table = CovariateTable::new(grid.len()).with_numeric(COVARIATE, grid.clone())?;
    let results: Vec<(u64, Result<Replicate>)> = (0..opts.replicates as u64)
        .into_par_iter()
        .map(|i| {
            let rc = cfg.with_seed(cfg.seed.wrapping_add(i));
            (rc.seed, run_replicate(&rc, opts, &table))
        })
        .collect();

    let names = ["r", "s"];
    let mut counts = vec![vec![0usize; grid.len()]; 2];
    let mut nrmse = vec![Vec::new(); 2];
    let mut failures = Vec::new();
    let mut ok = 0usize;
    for (seed, res) in results {
        match res {
            Ok(rep) => {
                ok += 1;
                for k in 0..2 {
                    for (c, &h) in counts[k].iter_mut().zip(&rep.hits[k]) {
                        *c += h as usize;
                    }
                    nrmse[k].push(rep.nrmse[k]);
                }
            }
            Err(e) => failures.push(ReplicateFailure {
                seed,
                reason: e.to_string(),
            }),
        }
    }
    if ok == 0 {
        return Err(Error::NumericalDegeneracy {
            step: 0,
            reason: format!("all {} replicates failed; first: {}", opts.replicates, failures[0].reason),
        });
    }
    let params = (0..2)
        .map(|k| {
            let by_grid: Vec<f64> = counts[k].iter().map(|&c| c as f64 / ok as f64).collect();
            ParamCoverage {
                param: names[k].to_string(),
                average: by_grid.iter().sum::<f64>() / by_grid.len() as f64,
                by_grid,
            }
        })
        .collect();
    let recovery = RecoveryReport {
        params: (0..2)
            .map(|k| ParamRecovery {
                param: names[k].to_string(),
                median: median(&nrmse[k]),
                values: nrmse[k].clone(),
            })
            .collect(),
    };
    Ok(StudyReport {
        coverage: CoverageReport {
            level: opts.level,
            grid,
            params,
            succeeded: ok,
            failed: failures.len(),
        },
        recovery,
        failures,
    })
}

pub fn coverage_experiment(cfg: &ScenarioConfig, opts: &StudyOptions) -> Result<CoverageReport> {
    replicate_study(cfg, opts).map(|r| r.coverage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ScenarioKind;

    fn small(seed: u64) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::new(ScenarioKind::BmCovariate, seed);
        cfg.fine_length = 5000;
        cfg.n_keep = 300;
        cfg.k = 6;
        cfg.grid_size = 20;
        cfg
    }

    #[test]
    fn extreme_levels() {
        let cfg = small(3);
        let mut opts = StudyOptions {
            replicates: 2,
            n_draws: 50,
            level: 1.0,
        };
        let full = coverage_experiment(&cfg, &opts).unwrap();
        assert!(full.params.iter().all(|p| p.average == 1.0));
        opts.level = 0.0;
        let none = coverage_experiment(&cfg, &opts).unwrap();
        assert!(none.params.iter().all(|p| p.average == 0.0));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
