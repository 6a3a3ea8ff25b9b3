use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::StudyOptions;
use crate::error::{Error, Result};
use crate::inference::ModelSpec;
use crate::sim::ScenarioConfig;

/// Covariate grid on which fitted curves are reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Covariate varied along the grid. Defaults to the first covariate of
    /// any smooth or linear term.
    #[serde(default)]
    pub covariate: Option<String>,
    #[serde(default)]
    pub from: Option<f64>,
    #[serde(default)]
    pub to: Option<f64>,
    #[serde(default = "default_points")]
    pub points: usize,
    /// Values for the other covariates. Missing ones take their data mean.
    #[serde(default)]
    pub fixed: BTreeMap<String, f64>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
}

fn default_points() -> usize {
    100
}
fn default_level() -> f64 {
    0.95
}
fn default_draws() -> usize {
    1000
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            covariate: None,
            from: None,
            to: None,
            points: default_points(),
            fixed: BTreeMap::new(),
            level: default_level(),
            draws: default_draws(),
        }
    }
}

/// JSON run configuration shared by all subcommands. Each subcommand reads
/// the sections it needs:
///
/// | command   | sections                                   |
/// |-----------|--------------------------------------------|
/// | fit       | `data`, `model`, `grid`                    |
/// | predict   | `fit` or (`data`, `model`), `grid`         |
/// | residuals | `data`, `fit` or `model`, `max_lag`        |
/// | simulate  | `scenario`                                 |
/// | coverage  | `scenario`, `study`                        |
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    /// Previously written `fit.json`.
    #[serde(default)]
    pub fit: Option<PathBuf>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub max_lag: Option<usize>,
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub study: Option<StudyOptions>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON config: {e}")))
    }

    /// Resolve relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data, &mut self.fit].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn require_model(&self) -> Result<&ModelSpec> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("missing 'model' section".into()))
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("missing 'data' path".into()))
    }

    pub fn require_scenario(&self) -> Result<&ScenarioConfig> {
        self.scenario
            .as_ref()
            .ok_or_else(|| Error::Config("missing 'scenario' section".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_error_has_location() {
        let e = RunConfig::from_json("{\n  \"data\": \"a.csv\",\n  oops\n}").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(e.is_user_error());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(RunConfig::from_json(r#"{"dta": "a.csv"}"#).is_err());
    }

    #[test]
    fn full_config() {
        let mut c = RunConfig::from_json(
            r#"{
              "data": "d.csv",
              "model": {"family": "BM_DRIFT", "formulas": [
                  {"param": "r"},
                  {"param": "s", "terms": [{"kind": "smooth", "covariate": "x1", "k": 8}]}]},
              "grid": {"points": 5},
              "scenario": {"scenario": "BM_COVARIATE", "r": 0.5, "s": "1 + x"},
              "study": {"replicates": 2}
            }"#,
        )
        .unwrap();
        c.resolve_paths(Path::new("/tmp/run"));
        assert_eq!(c.data.as_deref(), Some(Path::new("/tmp/run/d.csv")));
        assert_eq!(c.grid.as_ref().unwrap().points, 5);
        assert_eq!(c.grid.as_ref().unwrap().level, 0.95);
        assert_eq!(c.study.unwrap().n_draws, 1000);
        assert_eq!(c.require_model().unwrap().formulas.len(), 2);
    }
}
