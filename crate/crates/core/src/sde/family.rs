use serde::{Deserialize, Serialize};

use crate::basis::Link;
use crate::error::{Error, Result};

/// Supported SDE families. Every family has two time-varying parameters,
/// `r` (drift / location / mean reversion) and `s` (diffusion / scale).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SdeFamily {
    /// Brownian motion with drift: `dZ = r dt + s dW`.
    BmDrift,
    /// Geometric Brownian motion: `dZ = r Z dt + s Z dW`.
    Gbm,
    /// Ornstein–Uhlenbeck: `dZ = r (ζ - Z) dt + s dW`.
    Ou,
    /// Integrated OU velocity (continuous-time correlated random walk);
    /// positions observed, velocity latent.
    Ctcrw,
    /// Heavy-tailed increments `D = r Δ + s̃ √Δ X`, `X ~ t(ν)`.
    TIncrement,
}

/// Reference distribution of standardized residuals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    StandardNormal,
    StudentT { nu: f64 },
}

/// Non-time-varying auxiliary values of a family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxValues {
    /// OU centre of attraction (velocity mean for CTCRW is always 0).
    pub zeta: f64,
    /// Degrees of freedom of the t-increment model.
    pub nu: f64,
}

impl Default for AuxValues {
    fn default() -> Self {
        Self { zeta: 0.0, nu: 3.0 }
    }
}

impl SdeFamily {
    pub const ALL: [SdeFamily; 5] = [
        SdeFamily::BmDrift,
        SdeFamily::Gbm,
        SdeFamily::Ou,
        SdeFamily::Ctcrw,
        SdeFamily::TIncrement,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SdeFamily::BmDrift => "BM_DRIFT",
            SdeFamily::Gbm => "GBM",
            SdeFamily::Ou => "OU",
            SdeFamily::Ctcrw => "CTCRW",
            SdeFamily::TIncrement => "T_INCREMENT",
        }
    }

    pub fn param_names(self) -> [&'static str; 2] {
        ["r", "s"]
    }

    pub fn links(self) -> [Link; 2] {
        match self {
            SdeFamily::BmDrift | SdeFamily::Gbm | SdeFamily::TIncrement => {
                [Link::Identity, Link::Log]
            }
            SdeFamily::Ou | SdeFamily::Ctcrw => [Link::Log, Link::Log],
        }
    }

    /// Map a user-facing parameter name (including common aliases) to its
    /// index.
    pub fn param_index(self, name: &str) -> Result<usize> {
        let idx = match (self, name) {
            (_, "r") => 0,
            (_, "s") => 1,
            (SdeFamily::BmDrift | SdeFamily::Gbm, "mu" | "drift") => 0,
            (SdeFamily::Ctcrw, "beta") => 0,
            (SdeFamily::TIncrement, "s_tilde" | "scale") => 1,
            (SdeFamily::TIncrement, "location") => 0,
            (_, "sigma" | "diffusion") => 1,
            _ => {
                return Err(Error::UnknownName(format!(
                    "{name} (parameters of {} are r and s)",
                    self.tag()
                )))
            }
        };
        Ok(idx)
    }

    /// Whether the observed process is a noisy/partial view of a latent
    /// state, requiring the Kalman filter.
    pub fn is_latent(self) -> bool {
        matches!(self, SdeFamily::Ctcrw)
    }

    pub fn has_zeta(self) -> bool {
        matches!(self, SdeFamily::Ou)
    }

    pub fn reference(self, aux: &AuxValues) -> Reference {
        match self {
            SdeFamily::TIncrement => Reference::StudentT { nu: aux.nu },
            _ => Reference::StandardNormal,
        }
    }

    pub fn validate_aux(self, aux: &AuxValues) -> Result<()> {
        if self == SdeFamily::TIncrement && !(aux.nu > 2.0) {
            return Err(Error::Domain(format!(
                "t-increment degrees of freedom must exceed 2, got {}",
                aux.nu
            )));
        }
        if !aux.zeta.is_finite() {
            return Err(Error::Domain("zeta must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip_through_serde() {
        for f in SdeFamily::ALL {
            let s = serde_json::to_string(&f).unwrap();
            assert_eq!(s, format!("\"{}\"", f.tag()));
            let back: SdeFamily = serde_json::from_str(&s).unwrap();
            assert_eq!(back, f);
        }
    }

    #[test]
    fn aliases() {
        assert_eq!(SdeFamily::Ctcrw.param_index("beta").unwrap(), 0);
        assert_eq!(SdeFamily::Ctcrw.param_index("sigma").unwrap(), 1);
        assert!(SdeFamily::Ou.param_index("beta").is_err());
    }

    #[test]
    fn nu_must_exceed_two() {
        let aux = AuxValues { zeta: 0.0, nu: 2.0 };
        assert!(SdeFamily::TIncrement.validate_aux(&aux).is_err());
        assert!(SdeFamily::BmDrift.validate_aux(&aux).is_ok());
    }
}
