//! Damped Newton root finding for exactly identified moment systems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_rank, solve_square};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Convergence threshold on the sup-norm of the averaged moment.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub root: DVector<f64>,
    pub iterations: usize,
    /// Sup-norm of the averaged moment at `root`.
    pub residual: f64,
}

/// Finds a zero of `moment`, which returns the averaged moment vector and
/// its Jacobian at the given parameter.
///
/// Each Newton step is halved (up to `max_halvings` times) until the
/// Euclidean norm of the moment decreases.
pub fn newton<F>(start: DVector<f64>, moment: F, opts: NewtonOptions, context: &str) -> Result<NewtonOutcome>
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let mut theta = start;
    let (mut m, mut jac) = moment(&theta);
    let mut norm = m.norm();
    for iter in 0..opts.max_iter {
        let sup = m.amax();
        if sup < opts.tol {
            // a root of a rank-deficient system is not identified
            check_rank(&jac, context)?;
            return Ok(NewtonOutcome {
                root: theta,
                iterations: iter,
                residual: sup,
            });
        }
        let step = solve_square(&jac, &(-&m), context).map_err(|_| Error::Solver {
            context: format!("{context} (singular Jacobian)"),
            iterations: iter,
            residual: sup,
        })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand = &theta + &step * t;
            let (mc, jc) = moment(&cand);
            let nc = mc.norm();
            if nc.is_finite() && nc < norm {
                theta = cand;
                m = mc;
                jac = jc;
                norm = nc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::Solver {
                context: context.to_string(),
                iterations: iter,
                residual: m.amax(),
            });
        }
    }
    let sup = m.amax();
    if sup < opts.tol {
        check_rank(&jac, context)?;
        Ok(NewtonOutcome {
            root: theta,
            iterations: opts.max_iter,
            residual: sup,
        })
    } else {
        Err(Error::Solver {
            context: context.to_string(),
            iterations: opts.max_iter,
            residual: sup,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_exponential_equation() {
        // exp(t) - 3 = 0 from far away; plain Newton overshoots, damping keeps it stable
        let out = newton(
            DVector::from_vec(vec![8.0]),
            |t| {
                let e = t[0].exp();
                (DVector::from_vec(vec![e - 3.0]), DMatrix::from_element(1, 1, e))
            },
            NewtonOptions::default(),
            "exp",
        )
        .unwrap();
        assert!((out.root[0] - 3.0f64.ln()).abs() < 1e-9);
        assert!(out.residual < 1e-8);
    }

    #[test]
    fn reports_failure_without_root() {
        // exp(t) + 1 has no root
        let err = newton(
            DVector::from_vec(vec![0.0]),
            |t| {
                let e = t[0].exp();
                (DVector::from_vec(vec![e + 1.0]), DMatrix::from_element(1, 1, e))
            },
            NewtonOptions {
                max_iter: 20,
                ..Default::default()
            },
            "none",
        );
        assert!(matches!(err, Err(Error::Solver { .. })));
    }
}
