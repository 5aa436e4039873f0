//! Small dense solvers shared by the parametric fits and the DR baseline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value threshold below which a square system is
/// treated as singular.
const RANK_TOL: f64 = 1e-11;

/// Solves `A x = b` for a square `A`, reporting rank deficiency with the
/// row (instrument) index that carries the null direction.
pub fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    check_rank(a, context)?;
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::RankDeficient {
            context: context.to_string(),
            dim: 0,
        })
}

/// Errors when `a` is numerically singular.
pub fn check_rank(a: &DMatrix<f64>, context: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite moment matrix in {context}")));
    }
    let svd = a.clone().svd(true, false);
    let sv = &svd.singular_values;
    let max = sv.max();
    let (imin, min) = sv
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    if max == 0.0 || min <= RANK_TOL * max {
        let dim = svd
            .u
            .as_ref()
            .map(|u| {
                u.column(imin)
                    .iter()
                    .enumerate()
                    .fold((0, 0.0_f64), |acc, (i, v)| {
                        if v.abs() > acc.1 {
                            (i, v.abs())
                        } else {
                            acc
                        }
                    })
                    .0
            })
            .unwrap_or(0);
        return Err(Error::RankDeficient {
            context: context.to_string(),
            dim,
        });
    }
    Ok(())
}

/// Least squares fit of `y` on the rows produced by `design(i, buf)`.
pub fn least_squares<F>(n: usize, p: usize, y: impl Fn(usize) -> f64, design: F, context: &str) -> Result<DVector<f64>>
where
    F: Fn(usize, &mut [f64]),
{
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for i in 0..n {
        design(i, &mut row);
        let yi = y(i);
        for j in 0..p {
            xty[j] += row[j] * yi;
            for k in j..p {
                xtx[(j, k)] += row[j] * row[k];
            }
        }
    }
    symmetrize_upper(&mut xtx);
    solve_square(&xtx, &xty, context)
}

/// Logistic regression of a 0/1 response by Newton-Raphson (IRLS).
///
/// Returns the coefficient vector on the log-odds scale.
pub fn logistic_regression<F>(n: usize, p: usize, resp: impl Fn(usize) -> f64, design: F, context: &str) -> Result<DVector<f64>>
where
    F: Fn(usize, &mut [f64]),
{
    let mut beta = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    let mut last = f64::INFINITY;
    for iter in 0..100 {
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut g = DVector::<f64>::zeros(p);
        for i in 0..n {
            design(i, &mut row);
            let eta: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let mu = expit(eta);
            let wgt = (mu * (1.0 - mu)).max(1e-12);
            let r = resp(i) - mu;
            for j in 0..p {
                g[j] += row[j] * r;
                for k in j..p {
                    h[(j, k)] += wgt * row[j] * row[k];
                }
            }
        }
        symmetrize_upper(&mut h);
        let step = solve_square(&h, &g, context)?;
        beta += &step;
        let size = step.amax();
        if !size.is_finite() {
            break;
        }
        if size < 1e-10 || (size >= last && iter > 50) {
            return Ok(beta);
        }
        last = size;
    }
    if beta.iter().all(|v| v.is_finite()) {
        Ok(beta)
    } else {
        Err(Error::Solver {
            context: context.to_string(),
            iterations: 100,
            residual: f64::NAN,
        })
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn symmetrize_upper(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for j in 0..p {
        for k in 0..j {
            m[(j, k)] = m[(k, j)];
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_system_names_dimension() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        match solve_square(&a, &b, "test") {
            Err(Error::RankDeficient { dim, .. }) => assert!(dim < 3),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn ols_recovers_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let beta = least_squares(
            5,
            2,
            |i| 1.0 + 2.0 * xs[i],
            |i, r| {
                r[0] = 1.0;
                r[1] = xs[i];
            },
            "ols",
        )
        .unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-12 && (beta[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_matches_closed_form_saturated() {
        // binary covariate: fitted log-odds equal empirical log-odds per group
        let x = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let y = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let b = logistic_regression(
            9,
            2,
            |i| y[i],
            |i, r| {
                r[0] = 1.0;
                r[1] = x[i];
            },
            "logit",
        )
        .unwrap();
        assert!((b[0] - (1.0_f64 / 3.0).ln()).abs() < 1e-8);
        assert!((b[0] + b[1] - 4.0_f64.ln()).abs() < 1e-8);
    }
}
