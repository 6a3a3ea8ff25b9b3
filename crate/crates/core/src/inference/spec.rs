use serde::{Deserialize, Serialize};

use crate::basis::{ParamFormula, ParamSpec};
use crate::error::{Error, Result};
use crate::sde::{AuxValues, SdeFamily};

/// Gaussian prior on a named fixed-effect coefficient, e.g. `r.(Intercept)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
}

fn default_rel_tol() -> f64 {
    1e-7
}
fn default_max_iter() -> usize {
    200
}
fn default_inner_tol() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    /// Relative change in the marginal objective that ends the outer loop.
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Inner stopping rule: `|grad|_inf < inner_tol (1 + |objective|)`.
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_max_iter")]
    pub inner_max_iter: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            rel_tol: default_rel_tol(),
            max_iter: default_max_iter(),
            inner_tol: default_inner_tol(),
            inner_max_iter: default_max_iter(),
        }
    }
}

/// SDE family, response columns, per-parameter formulas and auxiliary values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: SdeFamily,
    /// Response columns. CTCRW treats each as an independent coordinate
    /// driven by the same parameters.
    #[serde(default)]
    pub responses: Vec<String>,
    pub formulas: Vec<ParamFormula>,
    /// OU centre of attraction. `None` estimates it.
    #[serde(default)]
    pub zeta: Option<f64>,
    /// Degrees of freedom of the t-increment model.
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub priors: Vec<Prior>,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
}

impl ModelSpec {
    pub fn new(family: SdeFamily, responses: &[&str], formulas: Vec<ParamFormula>) -> Self {
        Self {
            family,
            responses: responses.iter().map(|s| s.to_string()).collect(),
            formulas,
            zeta: None,
            nu: None,
            priors: Vec::new(),
            optimizer: OptimizerSettings::default(),
        }
    }

    pub fn with_zeta(mut self, zeta: f64) -> Self {
        self.zeta = Some(zeta);
        self
    }

    pub fn with_nu(mut self, nu: f64) -> Self {
        self.nu = Some(nu);
        self
    }

    pub fn with_prior(mut self, parameter: &str, mean: f64, sd: f64) -> Self {
        self.priors.push(Prior {
            parameter: parameter.to_string(),
            mean,
            sd,
        });
        self
    }

    pub fn response_names(&self) -> Vec<String> {
        if !self.responses.is_empty() {
            return self.responses.clone();
        }
        match self.family {
            SdeFamily::Ctcrw => vec!["x".into(), "y".into()],
            _ => vec!["z".into()],
        }
    }

    pub fn estimates_zeta(&self) -> bool {
        self.family.has_zeta() && self.zeta.is_none()
    }

    /// Starting auxiliary values (ζ is refined when estimated).
    pub fn aux(&self) -> Result<AuxValues> {
        let nu = match (self.family, self.nu) {
            (SdeFamily::TIncrement, None) => {
                return Err(Error::Config(
                    "T_INCREMENT requires a fixed 'nu' (degrees of freedom > 2)".into(),
                ))
            }
            (_, Some(nu)) => nu,
            (_, None) => AuxValues::default().nu,
        };
        let aux = AuxValues {
            zeta: self.zeta.unwrap_or(0.0),
            nu,
        };
        self.family.validate_aux(&aux)?;
        Ok(aux)
    }

    /// Validated per-parameter specifications in family order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let names = self.family.param_names();
        let links = self.family.links();
        let mut slots: [Option<&ParamFormula>; 2] = [None, None];
        for f in &self.formulas {
            let idx = self.family.param_index(&f.param)?;
            if slots[idx].is_some() {
                return Err(Error::Config(format!(
                    "parameter '{}' has more than one formula",
                    names[idx]
                )));
            }
            slots[idx] = Some(f);
        }
        names
            .iter()
            .zip(links)
            .zip(slots)
            .map(|((name, link), slot)| {
                let f = slot.ok_or_else(|| {
                    Error::Config(format!(
                        "{} requires a formula for parameter '{name}'",
                        self.family.tag()
                    ))
                })?;
                Ok(ParamSpec {
                    name: name.to_string(),
                    link,
                    terms: f.terms.clone(),
                })
            })
            .collect()
    }
}
