//! Design and penalty matrices for fixed effects, spline smooths and random
//! intercepts.

pub mod bspline;
pub mod design;
pub mod formula;

pub use bspline::BSplineBasis;
pub use design::{
    apply_link, build_design_set, build_spline_block, CovariateSource, CovariateTable, DesignSet,
    FixedTerm, ParamDesign, ParamSpec, ParamTerms, PenaltyBlock, RandomTerm, SmoothBasis,
    SplineBlock,
};
pub use formula::{BasisFamily, FormulaTerm, Link, ParamFormula};
