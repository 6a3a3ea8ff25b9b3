use serde::{Deserialize, Serialize};

/// Inverse-link applied to a linear predictor to obtain an SDE parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
        }
    }

    pub fn inverse_generic<R: crate::autodiff::Real>(self, eta: R) -> R {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
        }
    }

    pub fn forward(self, theta: f64) -> f64 {
        match self {
            Link::Identity => theta,
            Link::Log => theta.ln(),
        }
    }
}

/// Spline basis family for smooth terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    #[default]
    Bspline,
}

fn default_shrinkage() -> bool {
    true
}

/// One additive term of a parameter formula.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FormulaTerm {
    Intercept,
    Linear {
        covariate: String,
    },
    Smooth {
        covariate: String,
        k: usize,
        #[serde(default = "default_shrinkage")]
        shrinkage: bool,
        #[serde(default)]
        basis: BasisFamily,
    },
    RandomIntercept {
        factor: String,
    },
}

impl FormulaTerm {
    pub fn smooth(covariate: &str, k: usize) -> Self {
        FormulaTerm::Smooth {
            covariate: covariate.to_string(),
            k,
            shrinkage: true,
            basis: BasisFamily::Bspline,
        }
    }

    pub fn linear(covariate: &str) -> Self {
        FormulaTerm::Linear {
            covariate: covariate.to_string(),
        }
    }

    pub fn random_intercept(factor: &str) -> Self {
        FormulaTerm::RandomIntercept {
            factor: factor.to_string(),
        }
    }
}

/// Formula for one SDE parameter, e.g.
/// `{"param": "s", "terms": [{"kind": "smooth", "covariate": "x1", "k": 10}]}`.
/// An intercept is always included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFormula {
    pub param: String,
    #[serde(default)]
    pub terms: Vec<FormulaTerm>,
}

impl ParamFormula {
    pub fn new(param: &str, terms: Vec<FormulaTerm>) -> Self {
        Self {
            param: param.to_string(),
            terms,
        }
    }

    pub fn intercept_only(param: &str) -> Self {
        Self::new(param, Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_config_formula() {
        let f: ParamFormula = serde_json::from_str(
            r#"{"param": "sigma", "terms": [{"kind":"smooth","covariate":"temp","k":10,"shrinkage":true}, {"kind":"random_intercept","factor":"ID"}]}"#,
        )
        .unwrap();
        assert_eq!(f.param, "sigma");
        assert_eq!(f.terms[0], FormulaTerm::smooth("temp", 10));
        assert_eq!(f.terms[1], FormulaTerm::random_intercept("ID"));
    }

    #[test]
    fn links() {
        assert_eq!(Link::Log.inverse(0.0), 1.0);
        assert_eq!(Link::Identity.inverse(0.0), 0.0);
        assert!((Link::Log.inverse(1.5) - 1.5f64.exp()).abs() < 1e-12);
    }
}
