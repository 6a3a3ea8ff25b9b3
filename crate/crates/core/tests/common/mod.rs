#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use smoothsde::basis::{FormulaTerm, ParamFormula};
use smoothsde::data::Dataset;
use smoothsde::inference::ModelSpec;
use smoothsde::kalman::{Observation, StateSpaceModel, Transition};
use smoothsde::sde::SdeFamily;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Irregular time stamps with exponential-ish gaps of mean `dt`.
pub fn irregular_times<R: Rng>(n: usize, dt: f64, rng: &mut R) -> Vec<f64> {
    let mut t = 0.0;
    (0..n)
        .map(|i| {
            if i > 0 {
                t += dt * (0.2 + 1.6 * rng.random::<f64>());
            }
            t
        })
        .collect()
}

/// One series of BM with drift `r(x)` and diffusion `s(x)` at irregular times,
/// with covariate `x1` uniform on [0, 1]. Exact transitions.
pub fn bm_series_with<R: Rng>(
    n: usize,
    dt: f64,
    r: impl Fn(f64) -> f64,
    s: impl Fn(f64) -> f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let times = irregular_times(n, dt, rng);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut z = vec![0.0; n];
    for i in 1..n {
        let d = times[i] - times[i - 1];
        z[i] = z[i - 1] + r(x[i - 1]) * d + s(x[i - 1]) * d.sqrt() * normal(rng);
    }
    (times, z, x)
}

pub fn dataset(ids: Vec<String>, times: Vec<f64>, z: Vec<f64>, x: Vec<f64>) -> Dataset {
    Dataset::new(
        ids,
        times,
        vec![("z".into(), z.into_iter().map(Some).collect())],
        vec![("x1".into(), x)],
        vec![],
    )
    .unwrap()
}

/// Constant-parameter BM dataset, single series "1".
pub fn bm_dataset(n: usize, r: f64, s: f64, seed: u64) -> Dataset {
    let mut g = rng(seed);
    let (t, z, x) = bm_series_with(n, 0.1, |_| r, |_| s, &mut g);
    dataset(vec!["1".into(); n], t, z, x)
}

/// BM with a random drift intercept per series.
pub fn bm_groups(groups: usize, per: usize, r: f64, sd_re: f64, s: f64, seed: u64) -> Dataset {
    let mut g = rng(seed);
    let (mut ids, mut times, mut zs, mut xs) = (vec![], vec![], vec![], vec![]);
    for k in 0..groups {
        let b = sd_re * normal(&mut g);
        let (t, z, x) = bm_series_with(per, 0.2, |_| r + b, |_| s, &mut g);
        ids.extend(std::iter::repeat_n(format!("g{k}"), per));
        times.extend(t);
        zs.extend(z);
        xs.extend(x);
    }
    dataset(ids, times, zs, xs)
}

pub fn bm_spec(r_terms: Vec<FormulaTerm>, s_terms: Vec<FormulaTerm>) -> ModelSpec {
    ModelSpec::new(
        SdeFamily::BmDrift,
        &["z"],
        vec![ParamFormula::new("r", r_terms), ParamFormula::new("s", s_terms)],
    )
}

/// Log-density of `N(mean, cov)` at `x` by Cholesky.
pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len();
    let chol = cov.clone().cholesky().expect("covariance not PD");
    let d = x - mean;
    let sol = chol.solve(&d);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (n as f64 * LN_2PI + logdet + d.dot(&sol))
}

/// Stacked joint moments of all states `(x_0, ..., x_{n-1})`, built by
/// explicit products of transition matrices.
pub fn dense_state_moments(model: &StateSpaceModel) -> (DVector<f64>, DMatrix<f64>) {
    let n = model.observations.len();
    let m = model.a0.len();
    // x_i = Φ_{i,0} x_0 + Σ_{k<i} Φ_{i,k+1} (c_k + w_k), Φ_{i,j} = T_{i-1}…T_j
    let phi = |i: usize, j: usize| -> DMatrix<f64> {
        let mut p = DMatrix::identity(m, m);
        for k in j..i {
            p = &model.transitions[k].t * p;
        }
        p
    };
    let mut mean = DVector::zeros(n * m);
    let mut cov = DMatrix::zeros(n * m, n * m);
    for i in 0..n {
        let mut mu = phi(i, 0) * &model.a0;
        for k in 0..i {
            mu += phi(i, k + 1) * &model.transitions[k].c;
        }
        mean.rows_mut(i * m, m).copy_from(&mu);
        for j in 0..n {
            let mut c = phi(i, 0) * &model.p0 * phi(j, 0).transpose();
            for k in 0..i.min(j) {
                c += phi(i, k + 1) * &model.transitions[k].q * phi(j, k + 1).transpose();
            }
            cov.view_mut((i * m, j * m), (m, m)).copy_from(&c);
        }
    }
    (mean, cov)
}

/// Moments of the observed components listed in `idx` as (time, component).
pub fn dense_obs_moments(
    model: &StateSpaceModel,
    idx: &[(usize, usize)],
) -> (DVector<f64>, DMatrix<f64>) {
    let m = model.a0.len();
    let (sm, sc) = dense_state_moments(model);
    let k = idx.len();
    let mut mean = DVector::zeros(k);
    let mut cov = DMatrix::zeros(k, k);
    for (a, &(i, p)) in idx.iter().enumerate() {
        let oi: &Observation = &model.observations[i];
        let hi = oi.h.row(p);
        mean[a] = (hi * sm.rows(i * m, m))[0] + oi.d[p];
        for (b, &(j, q)) in idx.iter().enumerate() {
            let oj = &model.observations[j];
            let hj = oj.h.row(q);
            let block = sc.view((i * m, j * m), (m, m));
            let mut v = (hi * block * hj.transpose())[0];
            if i == j {
                v += oi.r[(p, q)];
            }
            cov[(a, b)] = v;
        }
    }
    (mean, cov)
}

/// Log-likelihood of the observed data from the dense joint Gaussian. With
/// `anchor_first` the first observed vector is conditioned on.
pub fn dense_loglik(model: &StateSpaceModel, y: &[Option<DVector<f64>>]) -> f64 {
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    let mut first_len = None;
    for (i, yi) in y.iter().enumerate() {
        if let Some(v) = yi {
            if first_len.is_none() {
                first_len = Some(v.len());
            }
            for p in 0..v.len() {
                idx.push((i, p));
                vals.push(v[p]);
            }
        }
    }
    let x = DVector::from_vec(vals);
    let (mean, cov) = dense_obs_moments(model, &idx);
    let full = mvn_logpdf(&x, &mean, &cov);
    if !model.anchor_first {
        return full;
    }
    let f = first_len.unwrap();
    let head = mvn_logpdf(
        &x.rows(0, f).into_owned(),
        &mean.rows(0, f).into_owned(),
        &cov.view((0, 0), (f, f)).into_owned(),
    );
    full - head
}

fn random_spd<R: Rng>(k: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| normal(rng));
    (&a * a.transpose() + DMatrix::identity(k, k) * 0.1) * scale
}

/// Random time-varying state-space model with `n` times, state dimension
/// `m` and observation dimension `q`, plus observations with some missing.
pub fn random_state_space<R: Rng>(
    n: usize,
    m: usize,
    q: usize,
    rng: &mut R,
) -> (StateSpaceModel, Vec<Option<DVector<f64>>>) {
    let transitions = (0..n.saturating_sub(1))
        .map(|_| Transition {
            t: DMatrix::from_fn(m, m, |i, j| if i == j { 0.9 } else { 0.0 } + 0.3 * normal(rng)),
            c: DVector::from_fn(m, |_, _| 0.5 * normal(rng)),
            q: random_spd(m, 0.3, rng),
        })
        .collect();
    let observations = (0..n)
        .map(|_| Observation {
            h: DMatrix::from_fn(q, m, |_, _| normal(rng)),
            d: DVector::from_fn(q, |_, _| normal(rng)),
            r: random_spd(q, 0.2, rng),
        })
        .collect();
    let model = StateSpaceModel {
        transitions,
        observations,
        a0: DVector::from_fn(m, |_, _| normal(rng)),
        p0: random_spd(m, 1.0, rng),
        anchor_first: rng.random::<bool>(),
    };
    let y = (0..n)
        .map(|i| {
            if i > 0 && rng.random::<f64>() < 0.2 {
                None
            } else {
                Some(DVector::from_fn(q, |_, _| 2.0 * normal(rng)))
            }
        })
        .collect();
    (model, y)
}
