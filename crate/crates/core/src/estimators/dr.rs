//! Generalized front-door plug-in baseline.
//!
//! Treats `L = (X, W, Z)` as if it were a sufficient measured confounder
//! set. Under the unmeasured confounding the proximal estimators target,
//! this estimator is biased by design.

use super::{Method, PsiEstimate};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, expit, least_squares, logistic_regression};

fn fill_l(d: &Dataset, i: usize, out: &mut [f64]) {
    let o = d.obs(i);
    let (px, pw) = (o.x.len(), o.w.len());
    out[..px].copy_from_slice(o.x);
    out[px..px + pw].copy_from_slice(o.w);
    out[px + pw..].copy_from_slice(o.z);
}

/// Plug-in front-door estimate of `psi` with working models
/// `E[Y | A, M, L]` linear in `(1, A, M, L)`, `E[M | A = 0, L]` linear in
/// `(1, L)` and `P(A = 1 | L)` logistic in `(1, L)`:
///
/// `psi = (1/n) sum_i sum_a P(a | L_i) E[Y | a, m0(L_i), L_i]`,
/// which is exact for a linear outcome model.
pub fn dr_frontdoor(d: &Dataset) -> Result<PsiEstimate> {
    let n = d.n();
    let pl = d.p_x() + d.p_w() + d.p_z();
    let outcome = least_squares(
        n,
        3 + pl,
        |i| d.y()[i],
        |i, row| {
            row[0] = 1.0;
            row[1] = d.a()[i];
            row[2] = d.m()[i];
            fill_l(d, i, &mut row[3..]);
        },
        "dr outcome regression",
    )?;

    let unexposed: Vec<usize> = (0..n).filter(|&i| d.a()[i] == 0.0).collect();
    if unexposed.is_empty() || unexposed.len() == n {
        return Err(Error::Precondition("dr_frontdoor requires both exposure arms".into()));
    }
    let mediator = least_squares(
        unexposed.len(),
        1 + pl,
        |k| d.m()[unexposed[k]],
        |k, row| {
            row[0] = 1.0;
            fill_l(d, unexposed[k], &mut row[1..]);
        },
        "dr mediator regression",
    )?;
    let propensity = logistic_regression(
        n,
        1 + pl,
        |i| d.a()[i],
        |i, row| {
            row[0] = 1.0;
            fill_l(d, i, &mut row[1..]);
        },
        "dr propensity",
    )?;

    let (b0, ba, bm) = (outcome[0], outcome[1], outcome[2]);
    let bl = &outcome.as_slice()[3..];
    let mut l = vec![0.0; pl];
    let mut total = 0.0;
    for i in 0..n {
        fill_l(d, i, &mut l);
        let m0 = mediator[0] + dot(&mediator.as_slice()[1..], &l);
        let p1 = expit(propensity[0] + dot(&propensity.as_slice()[1..], &l));
        total += b0 + ba * p1 + bm * m0 + dot(bl, &l);
    }
    Ok(PsiEstimate {
        method: Method::Dr,
        psi: total / n as f64,
        per_obs_if: Vec::new(),
    })
}
