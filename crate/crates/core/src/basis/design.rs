use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::bspline::BSplineBasis;
use super::formula::{FormulaTerm, Link};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{positive_eigen_summary, MatrixData};

/// Null-space penalty added when shrinkage is on, relative to the smallest
/// positive eigenvalue of the roughness penalty.
pub const SHRINKAGE_EPSILON: f64 = 0.1;
const EIGEN_REL_TOL: f64 = 1e-9;

/// Sum-to-zero constrained spline basis for one smooth term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothBasis {
    pub spline: BSplineBasis,
    /// `m × (m-1)` matrix whose columns span the coefficients satisfying the
    /// centering constraint over the construction data.
    pub constraint: MatrixData,
}

impl SmoothBasis {
    pub fn width(&self) -> usize {
        self.constraint.cols
    }

    pub fn design(&self, x: &[f64]) -> DMatrix<f64> {
        let z: DMatrix<f64> = (&self.constraint).into();
        self.spline.design(x) * z
    }

    pub fn is_extrapolated(&self, x: f64) -> bool {
        x < self.spline.lower || x > self.spline.upper
    }
}

/// Centered basis matrix, its roughness penalty, and the basis needed to
/// evaluate the smooth at new covariate values.
#[derive(Clone, Debug)]
pub struct SplineBlock {
    pub basis: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub smooth: SmoothBasis,
}

/// Householder completion: an `m × (m-1)` orthonormal basis of the
/// orthogonal complement of `c`.
fn null_space_of_row(c: &DVector<f64>) -> DMatrix<f64> {
    let m = c.len();
    let norm = c.norm();
    let mut u = c.clone();
    u[0] += if c[0] >= 0.0 { norm } else { -norm };
    let uu = u.dot(&u);
    let h = DMatrix::identity(m, m) - (&u * u.transpose()) * (2.0 / uu);
    h.columns(1, m - 1).into_owned()
}

/// Construct the centered cubic B-spline block for one smooth term.
///
/// The penalty `S` satisfies `β'Sβ = ∫ f''(x)² dx` for `f = basis · β`. With
/// `shrinkage` the null space of `S` receives a small positive penalty.
pub fn build_spline_block(x: &[f64], num_basis: usize, shrinkage: bool) -> Result<SplineBlock> {
    if num_basis > x.len() {
        return Err(Error::Dimension(format!(
            "num_basis = {num_basis} exceeds the number of observations ({})",
            x.len()
        )));
    }
    let spline = BSplineBasis::from_quantiles(x, num_basis)?;
    let raw = spline.design(x);
    let means = DVector::from_iterator(
        raw.ncols(),
        raw.column_iter().map(|c| c.sum() / raw.nrows() as f64),
    );
    let z = null_space_of_row(&means);
    let mut basis = &raw * &z;
    // remove the rounding residue so the centering holds to machine precision
    for mut col in basis.column_iter_mut() {
        let mean = col.sum() / col.len() as f64;
        col.add_scalar_mut(-mean);
    }
    let mut penalty = z.transpose() * spline.second_derivative_penalty() * &z;
    crate::linalg::symmetrize(&mut penalty);

    if shrinkage {
        let eig = penalty.clone().symmetric_eigen();
        let cut = EIGEN_REL_TOL * eig.eigenvalues.amax();
        let smallest = eig
            .eigenvalues
            .iter()
            .copied()
            .filter(|&e| e > cut)
            .fold(f64::INFINITY, f64::min);
        let eps = SHRINKAGE_EPSILON * smallest;
        let mut null = DMatrix::zeros(penalty.nrows(), penalty.ncols());
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev <= cut {
                let v = eig.eigenvectors.column(k);
                null += v * v.transpose();
            }
        }
        penalty += null * eps;
        crate::linalg::symmetrize(&mut penalty);
    }

    Ok(SplineBlock {
        basis,
        penalty,
        smooth: SmoothBasis {
            spline,
            constraint: MatrixData::from(&z),
        },
    })
}

/// Unpenalized column of a parameter formula.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixedTerm {
    Intercept,
    Linear { covariate: String },
}

impl FixedTerm {
    pub fn label(&self) -> String {
        match self {
            FixedTerm::Intercept => "(Intercept)".into(),
            FixedTerm::Linear { covariate } => covariate.clone(),
        }
    }
}

/// Penalized block of columns of a parameter formula.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RandomTerm {
    Smooth {
        covariate: String,
        basis: SmoothBasis,
    },
    RandomIntercept {
        factor: String,
        levels: Vec<String>,
    },
}

impl RandomTerm {
    pub fn width(&self) -> usize {
        match self {
            RandomTerm::Smooth { basis, .. } => basis.width(),
            RandomTerm::RandomIntercept { levels, .. } => levels.len(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            RandomTerm::Smooth { covariate, .. } => format!("s({covariate})"),
            RandomTerm::RandomIntercept { factor, .. } => format!("re({factor})"),
        }
    }
}

/// Row-aligned covariate source used to evaluate design matrices.
pub trait CovariateSource {
    fn n_rows(&self) -> usize;
    fn numeric(&self, name: &str) -> Option<&[f64]>;
    fn categorical(&self, name: &str) -> Option<&[String]>;
}

impl CovariateSource for Dataset {
    fn n_rows(&self) -> usize {
        Dataset::n_rows(self)
    }
    fn numeric(&self, name: &str) -> Option<&[f64]> {
        self.covariate(name).ok()
    }
    fn categorical(&self, name: &str) -> Option<&[String]> {
        self.factor(name).ok()
    }
}

/// Free-standing covariate table for predictions on new data.
#[derive(Clone, Debug, Default)]
pub struct CovariateTable {
    pub n: usize,
    pub numeric: BTreeMap<String, Vec<f64>>,
    pub factors: BTreeMap<String, Vec<String>>,
}

impl CovariateTable {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            ..Default::default()
        }
    }

    pub fn with_numeric(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.n {
            return Err(Error::Dimension(format!(
                "column '{name}' has {} rows, expected {}",
                values.len(),
                self.n
            )));
        }
        self.numeric.insert(name.to_string(), values);
        Ok(self)
    }

    pub fn with_factor(mut self, name: &str, values: Vec<String>) -> Result<Self> {
        if values.len() != self.n {
            return Err(Error::Dimension(format!(
                "column '{name}' has {} rows, expected {}",
                values.len(),
                self.n
            )));
        }
        self.factors.insert(name.to_string(), values);
        Ok(self)
    }
}

impl CovariateSource for CovariateTable {
    fn n_rows(&self) -> usize {
        self.n
    }
    fn numeric(&self, name: &str) -> Option<&[f64]> {
        self.numeric.get(name).map(|v| v.as_slice())
    }
    fn categorical(&self, name: &str) -> Option<&[String]> {
        self.factors.get(name).map(|v| v.as_slice())
    }
}

/// Term bookkeeping for one SDE parameter; sufficient to rebuild its design
/// matrices on any covariate table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTerms {
    pub name: String,
    pub link: Link,
    pub fixed: Vec<FixedTerm>,
    pub random: Vec<RandomTerm>,
}

impl ParamTerms {
    pub fn n_fixed(&self) -> usize {
        self.fixed.len()
    }

    pub fn n_random(&self) -> usize {
        self.random.iter().map(|t| t.width()).sum()
    }

    pub fn fixed_labels(&self) -> Vec<String> {
        self.fixed
            .iter()
            .map(|t| format!("{}.{}", self.name, t.label()))
            .collect()
    }

    pub fn fixed_design(&self, src: &dyn CovariateSource) -> Result<DMatrix<f64>> {
        let n = src.n_rows();
        let mut x = DMatrix::zeros(n, self.n_fixed());
        for (j, term) in self.fixed.iter().enumerate() {
            match term {
                FixedTerm::Intercept => x.column_mut(j).fill(1.0),
                FixedTerm::Linear { covariate } => {
                    let v = src
                        .numeric(covariate)
                        .ok_or_else(|| Error::UnknownName(covariate.clone()))?;
                    x.column_mut(j).copy_from_slice(v);
                }
            }
        }
        Ok(x)
    }

    /// Random-effect design. A random intercept whose factor is absent from
    /// `src` (or whose level is unseen) contributes zero columns, i.e. the
    /// population-level prediction.
    pub fn random_design(&self, src: &dyn CovariateSource) -> Result<DMatrix<f64>> {
        let n = src.n_rows();
        let mut x = DMatrix::zeros(n, self.n_random());
        let mut col = 0;
        for term in &self.random {
            match term {
                RandomTerm::Smooth { covariate, basis } => {
                    let v = src
                        .numeric(covariate)
                        .ok_or_else(|| Error::UnknownName(covariate.clone()))?;
                    let block = basis.design(v);
                    x.columns_mut(col, block.ncols()).copy_from(&block);
                }
                RandomTerm::RandomIntercept { factor, levels } => {
                    if let Some(values) = src.categorical(factor) {
                        for (i, v) in values.iter().enumerate() {
                            if let Some(l) = levels.iter().position(|l| l == v) {
                                x[(i, col + l)] = 1.0;
                            }
                        }
                    }
                }
            }
            col += term.width();
        }
        Ok(x)
    }

    /// Whether row `row` of `src` lies outside the construction range of any
    /// smooth term.
    pub fn extrapolated(&self, src: &dyn CovariateSource, row: usize) -> bool {
        self.random.iter().any(|t| match t {
            RandomTerm::Smooth { covariate, basis } => src
                .numeric(covariate)
                .is_some_and(|v| basis.is_extrapolated(v[row])),
            RandomTerm::RandomIntercept { .. } => false,
        })
    }
}

/// Specification of one SDE parameter: name, link and formula terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub link: Link,
    pub terms: Vec<FormulaTerm>,
}

#[derive(Clone, Debug)]
pub struct ParamDesign {
    pub terms: ParamTerms,
    pub x_fe: DMatrix<f64>,
    pub x_re: DMatrix<f64>,
    /// Offset of this parameter's columns in the global fixed-effect vector.
    pub fe_offset: usize,
    /// Offset of this parameter's columns in the global random-effect vector.
    pub re_offset: usize,
}

/// Penalty block `S_j` acting on `beta[start..start + len]`.
#[derive(Clone, Debug)]
pub struct PenaltyBlock {
    pub label: String,
    pub param: usize,
    pub start: usize,
    pub len: usize,
    /// Penalty scaled so its mean positive eigenvalue is one.
    pub matrix: DMatrix<f64>,
    /// Factor removed by the scaling (`raw = scale * matrix`).
    pub scale: f64,
    pub rank: usize,
    /// Sum of log positive eigenvalues of `matrix`.
    pub log_pdet: f64,
}

/// Design and penalty matrices for every SDE parameter of a model.
#[derive(Clone, Debug)]
pub struct DesignSet {
    pub params: Vec<ParamDesign>,
    pub penalties: Vec<PenaltyBlock>,
    pub n_rows: usize,
}

impl DesignSet {
    pub fn p_fe(&self) -> usize {
        self.params.iter().map(|p| p.x_fe.ncols()).sum()
    }

    pub fn p_re(&self) -> usize {
        self.params.iter().map(|p| p.x_re.ncols()).sum()
    }

    pub fn param_terms(&self) -> Vec<ParamTerms> {
        self.params.iter().map(|p| p.terms.clone()).collect()
    }

    /// Full `n × p_fe` fixed-effect design (parameters side by side).
    pub fn x_fe(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n_rows, self.p_fe());
        for p in &self.params {
            x.columns_mut(p.fe_offset, p.x_fe.ncols()).copy_from(&p.x_fe);
        }
        x
    }

    /// Full `n × p_re` random-effect design.
    pub fn x_re(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n_rows, self.p_re());
        for p in &self.params {
            x.columns_mut(p.re_offset, p.x_re.ncols()).copy_from(&p.x_re);
        }
        x
    }

    pub fn fixed_labels(&self) -> Vec<String> {
        self.params.iter().flat_map(|p| p.terms.fixed_labels()).collect()
    }

    /// `X_fe α + X_re β` restricted to the columns of parameter `param`.
    pub fn linear_predictor(&self, alpha: &[f64], beta: &[f64], param: usize) -> Result<Vec<f64>> {
        if alpha.len() != self.p_fe() || beta.len() != self.p_re() {
            return Err(Error::Dimension(format!(
                "coefficient lengths ({}, {}) do not match design ({}, {})",
                alpha.len(),
                beta.len(),
                self.p_fe(),
                self.p_re()
            )));
        }
        let p = self
            .params
            .get(param)
            .ok_or_else(|| Error::Dimension(format!("no parameter with index {param}")))?;
        let a = DVector::from_column_slice(&alpha[p.fe_offset..p.fe_offset + p.x_fe.ncols()]);
        let b = DVector::from_column_slice(&beta[p.re_offset..p.re_offset + p.x_re.ncols()]);
        let eta = &p.x_fe * a + &p.x_re * b;
        Ok(eta.as_slice().to_vec())
    }
}

/// Inverse link applied elementwise.
pub fn apply_link(eta: &[f64], link: Link) -> Vec<f64> {
    eta.iter().map(|&e| link.inverse(e)).collect()
}

fn scaled_penalty(label: String, param: usize, start: usize, raw: DMatrix<f64>) -> PenaltyBlock {
    let (rank, _) = positive_eigen_summary(&raw, EIGEN_REL_TOL);
    let ev = raw.clone().symmetric_eigen().eigenvalues;
    let cut = EIGEN_REL_TOL * ev.amax();
    let positive: Vec<f64> = ev.iter().copied().filter(|&e| e > cut).collect();
    let scale = positive.iter().sum::<f64>() / positive.len() as f64;
    let matrix = if scale == 1.0 { raw } else { raw / scale };
    let log_pdet = positive.iter().map(|e| (e / scale).ln()).sum();
    PenaltyBlock {
        label,
        param,
        start,
        len: matrix.nrows(),
        matrix,
        scale,
        rank,
        log_pdet,
    }
}

/// Build fixed/random design matrices and penalty blocks for every parameter.
///
/// Fixed columns are ordered intercept first, then linear terms, per
/// parameter. Each smooth is centered independently; each random intercept
/// gets an identity penalty.
pub fn build_design_set(spec: &[ParamSpec], data: &Dataset) -> Result<DesignSet> {
    let n = data.n_rows();
    let mut params = Vec::with_capacity(spec.len());
    let mut penalties = Vec::new();
    let (mut fe_offset, mut re_offset) = (0, 0);

    for (pi, ps) in spec.iter().enumerate() {
        let mut fixed = vec![FixedTerm::Intercept];
        let mut random = Vec::new();
        let mut raw_penalties = Vec::new();

        for term in &ps.terms {
            match term {
                FormulaTerm::Intercept => {}
                FormulaTerm::Linear { covariate } => {
                    data.covariate(covariate)?;
                    let t = FixedTerm::Linear {
                        covariate: covariate.clone(),
                    };
                    if !fixed.contains(&t) {
                        fixed.push(t);
                    }
                }
                FormulaTerm::Smooth {
                    covariate,
                    k,
                    shrinkage,
                    ..
                } => {
                    let x = data.covariate(covariate)?;
                    let block = build_spline_block(x, *k, *shrinkage).map_err(|e| match e {
                        Error::DegenerateCovariate(_) => Error::DegenerateCovariate(covariate.clone()),
                        other => other,
                    })?;
                    raw_penalties.push((format!("{}.s({covariate})", ps.name), block.penalty));
                    random.push(RandomTerm::Smooth {
                        covariate: covariate.clone(),
                        basis: block.smooth,
                    });
                }
                FormulaTerm::RandomIntercept { factor } => {
                    let values = data.factor(factor)?;
                    let levels: Vec<String> = values
                        .iter()
                        .cloned()
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect();
                    if levels.len() < 2 {
                        return Err(Error::DegenerateFactor(factor.clone()));
                    }
                    raw_penalties.push((
                        format!("{}.re({factor})", ps.name),
                        DMatrix::identity(levels.len(), levels.len()),
                    ));
                    random.push(RandomTerm::RandomIntercept {
                        factor: factor.clone(),
                        levels,
                    });
                }
            }
        }

        let terms = ParamTerms {
            name: ps.name.clone(),
            link: ps.link,
            fixed,
            random,
        };
        let x_fe = terms.fixed_design(data)?;
        let x_re = terms.random_design(data)?;

        let mut start = re_offset;
        for ((label, raw), term) in raw_penalties.into_iter().zip(&terms.random) {
            penalties.push(scaled_penalty(label, pi, start, raw));
            start += term.width();
        }

        let (nf, nr) = (x_fe.ncols(), x_re.ncols());
        params.push(ParamDesign {
            terms,
            x_fe,
            x_re,
            fe_offset,
            re_offset,
        });
        fe_offset += nf;
        re_offset += nr;
    }

    Ok(DesignSet {
        params,
        penalties,
        n_rows: n,
    })
}
