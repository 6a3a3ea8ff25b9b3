mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use smoothsde::basis::{build_design_set, build_spline_block, BSplineBasis, FormulaTerm, ParamFormula};
use smoothsde::data::Dataset;
use smoothsde::inference::ModelSpec;
use smoothsde::sde::SdeFamily;

fn covariate(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut g = common::rng(seed);
    (0..n).map(|_| scale * common::normal(&mut g)).collect()
}

fn min_eigen(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// `∫ f''(x)² dx` of `f = Σ γ_k B_k` by composite Simpson on a fine grid.
fn roughness_by_quadrature(b: &BSplineBasis, gamma: &DVector<f64>) -> f64 {
    let n = 200_000;
    let h = (b.upper - b.lower) / n as f64;
    let f2 = |x: f64| {
        let d = b.eval_derivs(x, 2);
        let v: f64 = d[2].iter().zip(gamma.iter()).map(|(a, g)| a * g).sum();
        v * v
    };
    let mut acc = f2(b.lower) + f2(b.upper);
    for i in 1..n {
        acc += f2(b.lower + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn penalty_matches_integrated_squared_second_derivative() {
    let x: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    let b = BSplineBasis::from_quantiles(&x, 5).unwrap();
    let s = b.second_derivative_penalty();
    let mut g = common::rng(1);
    for _ in 0..5 {
        let gamma = DVector::from_fn(5, |_, _| common::normal(&mut g));
        let quad = (gamma.transpose() * &s * &gamma)[0];
        let oracle = roughness_by_quadrature(&b, &gamma);
        assert!((quad - oracle).abs() <= 1e-4 * oracle, "{quad} vs {oracle}");
    }
}

#[test]
fn penalty_matches_quadrature_with_uneven_knots() {
    let x = covariate(2, 300, 1.0);
    let b = BSplineBasis::from_quantiles(&x, 9).unwrap();
    let s = b.second_derivative_penalty();
    let gamma = DVector::from_fn(9, |i, _| ((i * 7) % 5) as f64 - 2.0);
    let quad = (gamma.transpose() * &s * &gamma)[0];
    let oracle = roughness_by_quadrature(&b, &gamma);
    assert!((quad - oracle).abs() <= 1e-4 * oracle);
}

#[test]
fn linear_functions_are_unpenalized() {
    let x = covariate(3, 200, 2.0);
    let b = BSplineBasis::from_quantiles(&x, 8).unwrap();
    let s = b.second_derivative_penalty();
    // Greville abscissae reproduce linear functions exactly
    let greville = DVector::from_fn(b.num_basis(), |j, _| {
        b.knots[j + 1..=j + b.degree].iter().sum::<f64>() / b.degree as f64
    });
    let gamma = greville.map(|g| 1.5 - 0.7 * g);
    for xi in [-1.0, 0.0, 0.3, 1.2] {
        let v: f64 = b.eval(xi).iter().zip(gamma.iter()).map(|(a, g)| a * g).sum();
        assert!((v - (1.5 - 0.7 * xi)).abs() < 1e-12);
    }
    assert!((gamma.transpose() * &s * &gamma)[0].abs() < 1e-9 * s.amax());
}

fn projection_error(x: &[f64], y: &DVector<f64>, k: usize) -> f64 {
    let block = build_spline_block(x, k, false).unwrap();
    let n = x.len();
    let mut design = DMatrix::from_element(n, block.basis.ncols() + 1, 1.0);
    design.columns_mut(1, block.basis.ncols()).copy_from(&block.basis);
    let coef = design.clone().svd(true, true).solve(y, 1e-12).unwrap();
    (y - design * coef).norm()
}

#[test]
fn doubling_basis_size_does_not_worsen_projection() {
    let x: Vec<f64> = (0..400).map(|i| i as f64 / 399.0).collect();
    let y = DVector::from_iterator(400, x.iter().map(|&v| (5.0 * v).sin() + v * v));
    for k in [4, 5, 6, 8, 10, 12] {
        let (coarse, fine) = (projection_error(&x, &y, k), projection_error(&x, &y, 2 * k));
        assert!(fine <= coarse + 1e-12, "k {k}: {fine} > {coarse}");
    }
}

fn group_data(levels: usize, per: usize) -> Dataset {
    let n = levels * per;
    Dataset::new(
        (0..n).map(|i| format!("g{}", i / per)).collect(),
        (0..n).map(|i| (i % per) as f64).collect(),
        vec![("z".into(), (0..n).map(|i| Some((i as f64).sin())).collect())],
        vec![("x1".into(), covariate(7, n, 1.0))],
        vec![],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spline_blocks_are_centered_and_psd(
        seed in 0u64..10_000,
        n in 30usize..300,
        k in 3usize..15,
        scale in 0.01f64..100.0,
    ) {
        let x = covariate(seed, n, scale);
        let block = build_spline_block(&x, k, false).unwrap();
        for col in block.basis.column_iter() {
            prop_assert!(col.mean().abs() <= 1e-10);
        }
        let s = &block.penalty;
        prop_assert!((s - s.transpose()).amax() <= 1e-12 * s.amax().max(1.0));
        prop_assert!(min_eigen(s) >= -1e-10 * s.amax().max(1.0));
    }

    #[test]
    fn shrinkage_gives_positive_definite_blocks(
        seed in 0u64..10_000,
        n in 30usize..300,
        k in 3usize..15,
    ) {
        let x = covariate(seed, n, 1.0);
        let block = build_spline_block(&x, k, true).unwrap();
        prop_assert!(min_eigen(&block.penalty) > 0.0);
        prop_assert!(block.penalty.clone().cholesky().is_some());
    }

    #[test]
    fn random_intercept_penalty_is_identity(levels in 2usize..12, per in 4usize..10, k in 4usize..8) {
        let data = group_data(levels, per);
        let spec = ModelSpec::new(
            SdeFamily::BmDrift,
            &["z"],
            vec![
                ParamFormula::new("r", vec![FormulaTerm::smooth("x1", k), FormulaTerm::random_intercept("ID")]),
                ParamFormula::intercept_only("s"),
            ],
        );
        let ds = build_design_set(&spec.param_specs().unwrap(), &data).unwrap();
        prop_assert_eq!(ds.penalties.len(), 2);
        let re = &ds.penalties[1];
        prop_assert_eq!(&re.matrix, &DMatrix::<f64>::identity(levels, levels));
        prop_assert_eq!(re.rank, levels);
        prop_assert_eq!(re.log_pdet, 0.0);
        let x = ds.params[0].x_re.columns(re.start, levels).into_owned();
        for row in x.row_iter() {
            prop_assert_eq!(row.sum(), 1.0);
        }
        for penalty in &ds.penalties {
            prop_assert!(min_eigen(&penalty.matrix) > 0.0);
        }
    }
}
