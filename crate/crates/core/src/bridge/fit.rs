//! Estimating-equation fits of the parametric bridges.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::basis::{InstrumentBasis, InstrumentFn};
use super::params::{clamp_exponent, BridgeParams, Dims, H0Params};
use super::solver::{newton, NewtonOptions};
use crate::data::{Dataset, Obs};
use crate::error::{Error, Result};
use crate::linalg::{dot, logistic_regression, solve_square};

/// Moment tolerance shared by every bridge fit.
pub const MOMENT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Sup-norm of the averaged estimating equation at the solution.
    pub residual: f64,
    pub iterations: usize,
    /// Observations whose bridge exponent hit the clamp at the solution.
    pub clamps: usize,
    /// Which start produced the root (`"zero"`, `"logistic"`, ...).
    pub start: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit<T> {
    pub coef: T,
    pub diag: FitDiagnostics,
}

fn dims_of(d: &Dataset) -> Dims {
    Dims {
        p_x: d.p_x(),
        p_w: d.p_w(),
        p_z: d.p_z(),
    }
}

fn instrument_len(f: &InstrumentFn, o: &Obs<'_>, want: usize, name: &str) -> Result<()> {
    let mut buf = Vec::new();
    f(o, &mut buf);
    if buf.len() != want {
        return Err(Error::Dimension(format!(
            "instrument {name} has dimension {}, parameter has {want}",
            buf.len()
        )));
    }
    Ok(())
}

/// Solves `sum_i w_i c_i (t_i - b_i' theta) = 0` over rows `rows`.
fn solve_linear_moment(
    d: &Dataset,
    inst: &Dataset,
    rows: &[usize],
    instrument: &InstrumentFn,
    regressors: impl Fn(&Obs<'_>, &mut Vec<f64>),
    target: impl Fn(usize) -> f64,
    p: usize,
    context: &str,
) -> Result<Fit<Vec<f64>>> {
    let n = d.n() as f64;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let (mut c, mut b) = (Vec::with_capacity(p), Vec::with_capacity(p));
    for &i in rows {
        instrument(&inst.obs(i), &mut c);
        regressors(&d.obs(i), &mut b);
        let t = target(i);
        for j in 0..p {
            rhs[j] += c[j] * t;
            for k in 0..p {
                a[(j, k)] += c[j] * b[k];
            }
        }
    }
    a /= n;
    rhs /= n;
    let mut theta = solve_square(&a, &rhs, context)?;
    // one step of iterative refinement
    let r = &rhs - &a * &theta;
    if let Ok(delta) = solve_square(&a, &r, context) {
        theta += delta;
    }

    let mut moment = vec![0.0; p];
    for &i in rows {
        instrument(&inst.obs(i), &mut c);
        regressors(&d.obs(i), &mut b);
        let resid = target(i) - dot(&b, theta.as_slice());
        for j in 0..p {
            moment[j] += c[j] * resid;
        }
    }
    let residual = moment.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())) / n;
    if !(residual < MOMENT_TOL) {
        return Err(Error::Solver {
            context: context.to_string(),
            iterations: 1,
            residual,
        });
    }
    Ok(Fit {
        coef: theta.as_slice().to_vec(),
        diag: FitDiagnostics {
            residual,
            iterations: 1,
            clamps: 0,
            start: "direct".into(),
        },
    })
}

fn h1_regressors(o: &Obs<'_>, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend_from_slice(o.w);
    out.push(o.m);
    out.push(o.a);
    out.extend_from_slice(o.x);
}

fn h0_regressors(o: &Obs<'_>, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend_from_slice(o.w);
    out.extend_from_slice(o.x);
}

/// Solves `sum_i [Y_i - h1(W_i,M_i,A_i,X_i)] c1_i = 0` for `beta1`.
pub fn fit_h1(d: &Dataset, basis: &InstrumentBasis) -> Result<Fit<Vec<f64>>> {
    fit_h1_on(d, d, basis)
}

fn same_rows(d: &Dataset, inst: &Dataset) -> Result<()> {
    if d.n() == inst.n() {
        Ok(())
    } else {
        Err(Error::Dimension(format!("instrument data has {} rows, model data {}", inst.n(), d.n())))
    }
}

/// As [`fit_h1`] with the bridge regressors taken from `d` and the
/// instruments from `inst` (same rows, possibly different covariates).
pub fn fit_h1_on(d: &Dataset, inst: &Dataset, basis: &InstrumentBasis) -> Result<Fit<Vec<f64>>> {
    same_rows(d, inst)?;
    let p = dims_of(d).beta1();
    instrument_len(&basis.c1, &inst.obs(0), p, "c1")?;
    let rows: Vec<usize> = (0..d.n()).collect();
    solve_linear_moment(d, inst, &rows, &basis.c1, h1_regressors, |i| d.y()[i], p, "fit_h1")
}

/// Solves, for `a = 0, 1`,
/// `sum_i (1-A_i) [h1(W_i,M_i,a,X_i) - h0(W_i,a,X_i)] c0a_i = 0`
/// where `h1_at(i, a)` supplies the fitted first-stage bridge.
pub fn fit_h0_with(
    d: &Dataset,
    h1_at: &(dyn Fn(usize, f64) -> f64 + Sync),
    basis: &InstrumentBasis,
) -> Result<Fit<H0Params>> {
    fit_h0_on(d, d, h1_at, basis)
}

/// As [`fit_h0_with`] with instruments evaluated on `inst`.
pub fn fit_h0_on(
    d: &Dataset,
    inst: &Dataset,
    h1_at: &(dyn Fn(usize, f64) -> f64 + Sync),
    basis: &InstrumentBasis,
) -> Result<Fit<H0Params>> {
    same_rows(d, inst)?;
    let p = dims_of(d).beta0_arm();
    let rows: Vec<usize> = (0..d.n()).filter(|&i| d.a()[i] == 0.0).collect();
    let Some(&first) = rows.first() else {
        return Err(Error::Precondition("fit_h0 requires unexposed (A=0) rows".into()));
    };
    instrument_len(&basis.c00, &inst.obs(first), p, "c00")?;
    instrument_len(&basis.c01, &inst.obs(first), p, "c01")?;
    let arm0 = solve_linear_moment(d, inst, &rows, &basis.c00, h0_regressors, |i| h1_at(i, 0.0), p, "fit_h0 (a=0)")?;
    let arm1 = solve_linear_moment(d, inst, &rows, &basis.c01, h0_regressors, |i| h1_at(i, 1.0), p, "fit_h0 (a=1)")?;
    Ok(Fit {
        diag: FitDiagnostics {
            residual: arm0.diag.residual.max(arm1.diag.residual),
            iterations: 2,
            clamps: 0,
            start: "direct".into(),
        },
        coef: H0Params {
            arm0: arm0.coef,
            arm1: arm1.coef,
        },
    })
}

/// `fit_h0` with `h1` given by `beta1` on the same covariates.
pub fn fit_h0(d: &Dataset, beta1: &[f64], basis: &InstrumentBasis) -> Result<Fit<H0Params>> {
    let mut params = BridgeParams::zeros(dims_of(d));
    if beta1.len() != params.beta1.len() {
        return Err(Error::Dimension(format!(
            "beta1 has {} entries, expected {}",
            beta1.len(),
            params.beta1.len()
        )));
    }
    params.beta1 = beta1.to_vec();
    let h1 = |i: usize, a: f64| {
        let o = d.obs(i);
        params.h1_with(o.w, o.m, a, o.x, crate::data::CovariateForm::Raw)
    };
    fit_h0_with(d, &h1, basis)
}

fn both_arms(d: &Dataset, who: &str) -> Result<()> {
    if d.has_both_arms() {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "{who} requires both exposure arms (found {} exposed of {})",
            d.n_exposed(),
            d.n()
        )))
    }
}

fn q0_design(o: &Obs<'_>, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend_from_slice(o.z);
    out.extend_from_slice(o.x);
}

fn q1_design(o: &Obs<'_>, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend_from_slice(o.z);
    out.push(o.m);
    out.extend_from_slice(o.x);
}

/// Solves `sum_i [(1-A_i) q0(Z_i,X_i) - A_i] d0_i = 0` for `gamma0` with
/// `q0 = exp{-gamma0 . (1,z,x)}`.
///
/// Starts from zero, then from the sign-flipped logistic fit of `A` on
/// `(1, Z, X)`.
pub fn fit_q0(d: &Dataset, basis: &InstrumentBasis) -> Result<Fit<Vec<f64>>> {
    fit_q0_on(d, d, basis)
}

/// As [`fit_q0`] with instruments evaluated on `inst`.
pub fn fit_q0_on(d: &Dataset, inst: &Dataset, basis: &InstrumentBasis) -> Result<Fit<Vec<f64>>> {
    same_rows(d, inst)?;
    both_arms(d, "fit_q0")?;
    let p = dims_of(d).gamma0();
    instrument_len(&basis.d0, &inst.obs(0), p, "d0")?;
    let n = d.n();
    let nf = n as f64;

    let moment = |g: &DVector<f64>| {
        let mut m = DVector::<f64>::zeros(p);
        let mut jac = DMatrix::<f64>::zeros(p, p);
        let (mut dv, mut b) = (Vec::with_capacity(p), Vec::with_capacity(p));
        for i in 0..n {
            let o = d.obs(i);
            basis.d0.as_ref()(&inst.obs(i), &mut dv);
            q0_design(&o, &mut b);
            let (e, clamped) = clamp_exponent(-dot(&b, g.as_slice()));
            let q = e.exp();
            let r = (1.0 - o.a) * q - o.a;
            for j in 0..p {
                m[j] += r * dv[j];
            }
            if o.a == 0.0 && !clamped {
                for j in 0..p {
                    let s = q * dv[j];
                    for k in 0..p {
                        jac[(j, k)] -= s * b[k];
                    }
                }
            }
        }
        (m / nf, jac / nf)
    };

    let finish = |label: &str, out: super::solver::NewtonOutcome| Fit {
        diag: FitDiagnostics {
            residual: out.residual,
            iterations: out.iterations,
            clamps: count_q0_clamps(d, out.root.as_slice()),
            start: label.to_string(),
        },
        coef: out.root.as_slice().to_vec(),
    };
    let first_err = match newton(DVector::zeros(p), moment, NewtonOptions::default(), "fit_q0") {
        Ok(out) => return Ok(finish("zero", out)),
        Err(e) => e,
    };
    let pz = d.p_z();
    let Ok(logit) = logistic_regression(
        n,
        p,
        |i| d.a()[i],
        |i, row| {
            let o = d.obs(i);
            row[0] = 1.0;
            row[1..1 + pz].copy_from_slice(o.z);
            row[1 + pz..].copy_from_slice(o.x);
        },
        "fit_q0 warm start",
    ) else {
        return Err(first_err);
    };
    newton(-logit, moment, NewtonOptions::default(), "fit_q0").map(|out| finish("logistic", out))
}

fn count_q0_clamps(d: &Dataset, g: &[f64]) -> usize {
    let mut b = Vec::new();
    (0..d.n())
        .filter(|&i| {
            q0_design(&d.obs(i), &mut b);
            clamp_exponent(-dot(&b, g)).1
        })
        .count()
}

/// Solves `sum_i [A_i q1(Z_i,M_i,X_i) - (1-A_i) q0_i] d1_i = 0` for `gamma1`
/// where `q1 = q0 * exp{gamma1 . (1,z,m,x)}` and `q0_at(i)` supplies the
/// fitted first-stage exposure bridge.
pub fn fit_q1_with(
    d: &Dataset,
    q0_at: &(dyn Fn(usize) -> f64 + Sync),
    basis: &InstrumentBasis,
) -> Result<Fit<Vec<f64>>> {
    fit_q1_on(d, d, q0_at, basis)
}

/// As [`fit_q1_with`] with instruments evaluated on `inst`.
pub fn fit_q1_on(
    d: &Dataset,
    inst: &Dataset,
    q0_at: &(dyn Fn(usize) -> f64 + Sync),
    basis: &InstrumentBasis,
) -> Result<Fit<Vec<f64>>> {
    same_rows(d, inst)?;
    both_arms(d, "fit_q1")?;
    let p = dims_of(d).gamma1();
    instrument_len(&basis.d1, &inst.obs(0), p, "d1")?;
    let n = d.n();
    let nf = n as f64;
    let q0: Vec<f64> = (0..n).map(q0_at).collect();

    let moment = |g: &DVector<f64>| {
        let mut m = DVector::<f64>::zeros(p);
        let mut jac = DMatrix::<f64>::zeros(p, p);
        let (mut dv, mut e) = (Vec::with_capacity(p), Vec::with_capacity(p));
        for i in 0..n {
            let o = d.obs(i);
            basis.d1.as_ref()(&inst.obs(i), &mut dv);
            let r = if o.a == 1.0 {
                q1_design(&o, &mut e);
                let (lin, clamped) = clamp_exponent(dot(&e, g.as_slice()));
                let q1 = q0[i] * lin.exp();
                if !clamped {
                    for j in 0..p {
                        let s = q1 * dv[j];
                        for k in 0..p {
                            jac[(j, k)] += s * e[k];
                        }
                    }
                }
                q1
            } else {
                -q0[i]
            };
            for j in 0..p {
                m[j] += r * dv[j];
            }
        }
        (m / nf, jac / nf)
    };

    // second start balances the intercept moment exactly
    let (s1, s0) = (0..n).fold((0.0, 0.0), |(s1, s0), i| {
        if d.a()[i] == 1.0 {
            (s1 + q0[i], s0)
        } else {
            (s1, s0 + q0[i])
        }
    });
    let mut balanced = DVector::zeros(p);
    if s1 > 0.0 && s0 > 0.0 {
        balanced[0] = (s0 / s1).ln();
    }
    let starts = [("zero", DVector::zeros(p)), ("balanced", balanced)];
    let mut last_err = None;
    for (label, start) in starts {
        match newton(start, moment, NewtonOptions::default(), "fit_q1") {
            Ok(out) => {
                let mut e = Vec::new();
                let clamps = (0..n)
                    .filter(|&i| {
                        q1_design(&d.obs(i), &mut e);
                        clamp_exponent(dot(&e, out.root.as_slice())).1
                    })
                    .count();
                return Ok(Fit {
                    coef: out.root.as_slice().to_vec(),
                    diag: FitDiagnostics {
                        residual: out.residual,
                        iterations: out.iterations,
                        clamps,
                        start: label.to_string(),
                    },
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one start"))
}

/// `fit_q1` with `q0` given by `gamma0` on the same covariates.
pub fn fit_q1(d: &Dataset, gamma0: &[f64], basis: &InstrumentBasis) -> Result<Fit<Vec<f64>>> {
    let mut params = BridgeParams::zeros(dims_of(d));
    if gamma0.len() != params.gamma0.len() {
        return Err(Error::Dimension(format!(
            "gamma0 has {} entries, expected {}",
            gamma0.len(),
            params.gamma0.len()
        )));
    }
    params.gamma0 = gamma0.to_vec();
    let q0 = |i: usize| {
        let o = d.obs(i);
        params.q0_with(o.z, o.x, crate::data::CovariateForm::Raw).0
    };
    fit_q1_with(d, &q0, basis)
}
