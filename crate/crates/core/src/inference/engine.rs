//! Negative log-likelihood of the SDE transitions as a function of the full
//! coefficient vector `u = (α, β)`, with exact gradients and Hessians.
//!
//! Directly observed families contribute one term per transition that
//! depends on the two linear predictors at the start of the interval, so the
//! Hessian is `Σ_pq D_p' diag(w_pq) D_q`. The CTCRW filter is differentiated
//! by propagating the sensitivities of its five state moments through each
//! step.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::HyperDual;
use crate::basis::{DesignSet, Link};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kalman::{ctcrw_step_generic, ctcrw_track_loglik, CtcrwFilterState};
use crate::sde::density::{direct_logdens, t_log_norm};
use crate::sde::{AuxValues, SdeFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Order {
    Value,
    Gradient,
    Hessian,
}

/// Negative log-likelihood with (optionally) its gradient and Hessian.
#[derive(Clone, Debug)]
pub(crate) struct Derivs {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    /// First row whose contribution was not finite.
    pub bad_row: Option<usize>,
}

#[derive(Clone, Debug)]
pub(crate) struct Engine {
    family: SdeFamily,
    links: [Link; 2],
    p: usize,
    /// `n × p` design of each SDE parameter against the full coefficient
    /// vector.
    design: [DMatrix<f64>; 2],
    /// Transposes of `design`, so that each row is a contiguous column.
    design_t: [DMatrix<f64>; 2],
    times: Vec<f64>,
    series: Vec<Range<usize>>,
    responses: Vec<Vec<Option<f64>>>,
}

impl Engine {
    pub fn new(family: SdeFamily, ds: &DesignSet, data: &Dataset, responses: &[String]) -> Result<Self> {
        let n = data.n_rows();
        let p_fe = ds.p_fe();
        let p = p_fe + ds.p_re();
        if ds.params.len() != 2 {
            return Err(Error::Dimension("expected designs for parameters r and s".into()));
        }
        let mut design = [DMatrix::zeros(n, p), DMatrix::zeros(n, p)];
        for (k, pd) in ds.params.iter().enumerate() {
            design[k]
                .columns_mut(pd.fe_offset, pd.x_fe.ncols())
                .copy_from(&pd.x_fe);
            design[k]
                .columns_mut(p_fe + pd.re_offset, pd.x_re.ncols())
                .copy_from(&pd.x_re);
        }
        let mut cols = Vec::with_capacity(responses.len());
        for name in responses {
            let col = data.response(name)?.to_vec();
            if !family.is_latent() {
                if let Some(row) = col.iter().position(|v| v.is_none()) {
                    return Err(Error::Data(format!(
                        "missing response '{name}' at row {} (only latent-state families accept missing responses)",
                        row + 1
                    )));
                }
            }
            if family == SdeFamily::Gbm {
                if let Some(row) = col.iter().position(|v| v.is_some_and(|z| z <= 0.0)) {
                    return Err(Error::Data(format!(
                        "GBM requires positive responses; '{name}' is non-positive at row {}",
                        row + 1
                    )));
                }
            }
            cols.push(col);
        }
        if responses.is_empty() {
            return Err(Error::Config("no response columns".into()));
        }
        Ok(Self {
            family,
            links: [ds.params[0].terms.link, ds.params[1].terms.link],
            p,
            design_t: [design[0].transpose(), design[1].transpose()],
            design,
            times: data.times().to_vec(),
            series: data.series().iter().map(|s| s.rows()).collect(),
            responses: cols,
        })
    }

    pub fn responses(&self) -> &[Vec<Option<f64>>] {
        &self.responses
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn series(&self) -> &[Range<usize>] {
        &self.series
    }

    pub fn nll(&self, u: &DVector<f64>, aux: &AuxValues, order: Order) -> Result<Derivs> {
        if u.len() != self.p {
            return Err(Error::Dimension(format!(
                "coefficient vector has length {}, expected {}",
                u.len(),
                self.p
            )));
        }
        let eta = [&self.design[0] * u, &self.design[1] * u];
        if self.family.is_latent() {
            self.ctcrw_nll(&eta, order)
        } else {
            Ok(self.direct_nll(&eta, aux, order))
        }
    }

    fn direct_nll(&self, eta: &[DVector<f64>; 2], aux: &AuxValues, order: Order) -> Derivs {
        let n = self.times.len();
        let t_norm = if self.family == SdeFamily::TIncrement {
            t_log_norm(aux.nu)
        } else {
            0.0
        };
        let mut out = Derivs {
            value: 0.0,
            grad: DVector::zeros(if order >= Order::Gradient { self.p } else { 0 }),
            hess: DMatrix::zeros(0, 0),
            bad_row: None,
        };
        let want_d = order >= Order::Gradient;
        // per-row first and second derivatives with respect to (η_r, η_s)
        let mut g = [vec![0.0; if want_d { n } else { 0 }], vec![0.0; if want_d { n } else { 0 }]];
        let mut w = [
            vec![0.0; if order == Order::Hessian { n } else { 0 }],
            vec![0.0; if order == Order::Hessian { n } else { 0 }],
            vec![0.0; if order == Order::Hessian { n } else { 0 }],
        ];
        let mut ll = 0.0;
        for rows in &self.series {
            for i in rows.start..rows.end.saturating_sub(1) {
                let dt = self.times[i + 1] - self.times[i];
                let term = if want_d {
                    let r = self.links[0].inverse_generic(HyperDual::<2>::variable(eta[0][i], 0));
                    let s = self.links[1].inverse_generic(HyperDual::<2>::variable(eta[1][i], 1));
                    let mut acc = HyperDual::<2>::constant(0.0);
                    for col in &self.responses {
                        let (a, b) = (col[i].unwrap_or(f64::NAN), col[i + 1].unwrap_or(f64::NAN));
                        acc = acc + direct_logdens(self.family, a, b, dt, r, s, aux, t_norm);
                    }
                    g[0][i] = -acc.g[0];
                    g[1][i] = -acc.g[1];
                    if order == Order::Hessian {
                        w[0][i] = -acc.h[0][0];
                        w[1][i] = -acc.h[0][1];
                        w[2][i] = -acc.h[1][1];
                    }
                    acc.v
                } else {
                    let r = self.links[0].inverse(eta[0][i]);
                    let s = self.links[1].inverse(eta[1][i]);
                    self.responses
                        .iter()
                        .map(|col| {
                            let (a, b) = (col[i].unwrap_or(f64::NAN), col[i + 1].unwrap_or(f64::NAN));
                            direct_logdens(self.family, a, b, dt, r, s, aux, t_norm)
                        })
                        .sum()
                };
                if !term.is_finite() && out.bad_row.is_none() {
                    out.bad_row = Some(i);
                }
                ll += term;
            }
        }
        out.value = -ll;
        if out.bad_row.is_some() {
            out.value = f64::INFINITY;
            return out;
        }
        if want_d {
            let (dr, ds) = (&self.design[0], &self.design[1]);
            out.grad = dr.tr_mul(&DVector::from_column_slice(&g[0]))
                + ds.tr_mul(&DVector::from_column_slice(&g[1]));
        }
        if order == Order::Hessian {
            let (dr, ds) = (&self.design[0], &self.design[1]);
            let scaled = |d: &DMatrix<f64>, wt: &[f64]| {
                let mut m = d.clone();
                for (mut row, &wi) in m.row_iter_mut().zip(wt) {
                    row *= wi;
                }
                m
            };
            let mut h = dr.tr_mul(&scaled(dr, &w[0])) + ds.tr_mul(&scaled(ds, &w[2]));
            let cross = dr.tr_mul(&scaled(ds, &w[1]));
            h += &cross + cross.transpose();
            out.hess = h;
        }
        out
    }

    fn ctcrw_nll(&self, eta: &[DVector<f64>; 2], order: Order) -> Result<Derivs> {
        let mut out = Derivs {
            value: 0.0,
            grad: DVector::zeros(if order >= Order::Gradient { self.p } else { 0 }),
            hess: if order == Order::Hessian {
                DMatrix::zeros(self.p, self.p)
            } else {
                DMatrix::zeros(0, 0)
            },
            bad_row: None,
        };
        let r: Vec<f64> = eta[0].iter().map(|&e| self.links[0].inverse(e)).collect();
        let s: Vec<f64> = eta[1].iter().map(|&e| self.links[1].inverse(e)).collect();
        let mut ll = 0.0;
        for rows in &self.series {
            for col in &self.responses {
                let y = &col[rows.clone()];
                if y.iter().all(|v| v.is_none()) {
                    continue;
                }
                let res = if order == Order::Value {
                    ctcrw_track_loglik(
                        &self.times[rows.clone()],
                        y,
                        &r[rows.clone()],
                        &s[rows.clone()],
                        0.0,
                    )
                } else {
                    self.ctcrw_track_derivs(rows.clone(), y, eta, order, &mut out)
                };
                match res {
                    Ok(v) => ll += v,
                    Err(Error::NumericalDegeneracy { step, .. }) => {
                        out.bad_row = Some(rows.start + step);
                        out.value = f64::INFINITY;
                        return Ok(out);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        out.value = -ll;
        if !out.value.is_finite() {
            out.value = f64::INFINITY;
            out.bad_row = Some(0);
        }
        Ok(out)
    }

    /// Adds `-∇ℓ` (and `-∇²ℓ`) of one coordinate of one track to `out` and
    /// returns `ℓ`.
    fn ctcrw_track_derivs(
        &self,
        rows: Range<usize>,
        y: &[Option<f64>],
        eta: &[DVector<f64>; 2],
        order: Order,
        out: &mut Derivs,
    ) -> Result<f64> {
        const NS: usize = 5;
        const NI: usize = 7;
        let p = self.p;
        let hess = order == Order::Hessian;
        let first = y.iter().position(|v| v.is_some()).unwrap_or(0);
        let mut state = CtcrwFilterState::<f64>::diffuse(y[first].unwrap_or(0.0));
        if let Some(y0) = y[0] {
            state = state.update(y0, 0.0).0;
        }
        // sensitivities of the five state moments
        let mut sg = vec![0.0; NS * p];
        let mut sh = vec![0.0; if hess { NS * p * p } else { 0 }];
        let mut new_sg = sg.clone();
        let mut new_sh = sh.clone();
        let mut jac = vec![0.0; NI * p];
        let mut hj = vec![0.0; NI * p];
        let mut g_l = vec![0.0; p];
        let mut h_l = vec![0.0; if hess { p * p } else { 0 }];
        // upper triangle of this track's contribution to the Hessian
        let mut acc_h = vec![0.0; if hess { p * p } else { 0 }];
        let (dr, ds) = (&self.design_t[0], &self.design_t[1]);
        let mut ll = 0.0;

        for k in 1..rows.len() {
            let prev = rows.start + k - 1;
            let dt = self.times[prev + 1] - self.times[prev];
            let x = [
                HyperDual::<NI>::variable(state.a[0], 0),
                HyperDual::<NI>::variable(state.a[1], 1),
                HyperDual::<NI>::variable(state.p[0], 2),
                HyperDual::<NI>::variable(state.p[1], 3),
                HyperDual::<NI>::variable(state.p[2], 4),
            ];
            let r = self.links[0].inverse_generic(HyperDual::<NI>::variable(eta[0][prev], 5));
            let sv = self.links[1].inverse_generic(HyperDual::<NI>::variable(eta[1][prev], 6));
            let local = CtcrwFilterState::new([x[0], x[1]], [x[2], x[3], x[4]]);
            let pred = local.predict(&ctcrw_step_generic(dt, r, sv));
            let (next, term) = match y[k] {
                Some(yk) => {
                    let (upd, l, f) = pred.update(yk, 0.0);
                    if !(f > 0.0) || !f.is_finite() {
                        return Err(Error::NumericalDegeneracy {
                            step: k,
                            reason: format!("innovation variance {f}"),
                        });
                    }
                    (upd, (k != first).then_some(l))
                }
                None => (pred, None),
            };
            let outputs = [next.a[0], next.a[1], next.p[0], next.p[1], next.p[2]];

            // Jacobian of the local inputs with respect to u
            jac[..NS * p].copy_from_slice(&sg);
            jac[5 * p..6 * p].copy_from_slice(dr.column(prev).as_slice());
            jac[6 * p..7 * p].copy_from_slice(ds.column(prev).as_slice());

            // Chain rule through the local map. Only the upper triangle of
            // each second-order block is formed.
            let mut propagate = |o: &HyperDual<NI>, g_out: &mut [f64], h_out: Option<&mut [f64]>| {
                g_out.fill(0.0);
                for a in 0..NI {
                    let ga = o.g[a];
                    if ga != 0.0 {
                        for (dst, &j) in g_out.iter_mut().zip(&jac[a * p..(a + 1) * p]) {
                            *dst += ga * j;
                        }
                    }
                }
                let Some(h_out) = h_out else { return };
                hj.fill(0.0);
                for a in 0..NI {
                    let row = &mut hj[a * p..(a + 1) * p];
                    for b in 0..NI {
                        let hab = o.h[a][b];
                        if hab != 0.0 {
                            for (dst, &j) in row.iter_mut().zip(&jac[b * p..(b + 1) * p]) {
                                *dst += hab * j;
                            }
                        }
                    }
                }
                h_out.fill(0.0);
                for a in 0..NS {
                    let ga = o.g[a];
                    if ga == 0.0 {
                        continue;
                    }
                    let src = &sh[a * p * p..(a + 1) * p * p];
                    for c in 0..p {
                        let r = c * p + c..(c + 1) * p;
                        for (dst, &v) in h_out[r.clone()].iter_mut().zip(&src[r]) {
                            *dst += ga * v;
                        }
                    }
                }
                for a in 0..NI {
                    let ja = &jac[a * p..(a + 1) * p];
                    let ha = &hj[a * p..(a + 1) * p];
                    for c in 0..p {
                        let jc = ja[c];
                        if jc == 0.0 {
                            continue;
                        }
                        for (dst, &v) in h_out[c * p + c..(c + 1) * p].iter_mut().zip(&ha[c..]) {
                            *dst += jc * v;
                        }
                    }
                }
            };

            if let Some(l) = term {
                ll += l.v;
                propagate(&l, &mut g_l, hess.then_some(h_l.as_mut_slice()));
                for c in 0..p {
                    out.grad[c] -= g_l[c];
                }
                if hess {
                    for c in 0..p {
                        for d in c..p {
                            acc_h[c * p + d] -= h_l[c * p + d];
                        }
                    }
                }
            }
            for (o, out_state) in outputs.iter().enumerate() {
                let (g_slice, h_slice) = (
                    &mut new_sg[o * p..(o + 1) * p],
                    if hess {
                        Some(&mut new_sh[o * p * p..(o + 1) * p * p])
                    } else {
                        None
                    },
                );
                propagate(out_state, g_slice, h_slice);
            }
            std::mem::swap(&mut sg, &mut new_sg);
            std::mem::swap(&mut sh, &mut new_sh);
            state = CtcrwFilterState::new(
                [outputs[0].v, outputs[1].v],
                [outputs[2].v, outputs[3].v, outputs[4].v],
            );
        }
        if hess {
            for c in 0..p {
                for d in c..p {
                    let v = acc_h[c * p + d];
                    out.hess[(c, d)] += v;
                    if d != c {
                        out.hess[(d, c)] += v;
                    }
                }
            }
        }
        Ok(ll)
    }
}
