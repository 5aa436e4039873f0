use nalgebra::Matrix3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RowMatrix};
use crate::error::{Error, Result};
use crate::linalg::expit;
use crate::rng::stream_rng;

/// `intercept + a*A + x'X + u*U + sd*N(0,1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianEq {
    pub intercept: f64,
    pub a: f64,
    pub x: [f64; 2],
    pub u: f64,
    pub sd: f64,
}

impl GaussianEq {
    #[inline]
    fn mean(&self, a: f64, x: &[f64; 2], u: f64) -> f64 {
        self.intercept + self.a * a + self.x[0] * x[0] + self.x[1] * x[1] + self.u * u
    }
}

/// `logit P(A = 1 | X, U) = intercept + x'X + u*U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureEq {
    pub intercept: f64,
    pub x: [f64; 2],
    pub u: f64,
}

/// `Y = intercept + a*A + m*M + w*W + x'X + u*U + sd*N(0,1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEq {
    pub intercept: f64,
    pub a: f64,
    pub m: f64,
    pub w: f64,
    pub x: [f64; 2],
    pub u: f64,
    pub sd: f64,
}

/// Coefficients of the linear-Gaussian simulation design with latent `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpCoefficients {
    /// Mean of `(X1, X2, U)`.
    pub mean: [f64; 3],
    /// Covariance of `(X1, X2, U)`.
    pub cov: [[f64; 3]; 3],
    pub exposure: ExposureEq,
    pub z: GaussianEq,
    /// The `a` coefficient must be zero: `W` has no exposure path.
    pub w: GaussianEq,
    pub m: GaussianEq,
    pub y: OutcomeEq,
}

impl Default for DgpCoefficients {
    fn default() -> Self {
        Self {
            mean: [0.25, 0.25, 0.0],
            cov: [[0.25, 0.0, 0.05], [0.0, 0.25, 0.05], [0.05, 0.05, 1.0]],
            exposure: ExposureEq {
                intercept: 0.0,
                x: [-0.5, -0.5],
                u: -0.4,
            },
            z: GaussianEq {
                intercept: 0.2,
                a: -0.52,
                x: [0.2, 0.2],
                u: -1.0,
                sd: 1.0,
            },
            w: GaussianEq {
                intercept: 0.3,
                a: 0.0,
                x: [0.2, 0.2],
                u: -0.6,
                sd: 1.0,
            },
            m: GaussianEq {
                intercept: 0.0,
                a: -0.3,
                x: [-0.5, -0.5],
                u: 1.5,
                sd: 1.0,
            },
            y: OutcomeEq {
                intercept: 2.0,
                a: 2.0,
                m: 1.0,
                w: 2.0,
                x: [-1.0, -1.0],
                u: -1.0,
                sd: 2.0,
            },
        }
    }
}

impl DgpCoefficients {
    /// Checks the covariance is symmetric positive definite and returns
    /// its lower Cholesky factor.
    pub fn cholesky(&self) -> Result<Matrix3<f64>> {
        let c = Matrix3::from_fn(|i, j| self.cov[i][j]);
        if (c - c.transpose()).abs().max() > 1e-12 {
            return Err(Error::Domain("covariance of (X, U) is not symmetric".into()));
        }
        c.cholesky()
            .map(|ch| ch.l())
            .ok_or_else(|| Error::Domain("covariance of (X, U) is not positive definite".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.cholesky()?;
        if self.w.a != 0.0 {
            return Err(Error::Domain("the W equation cannot depend on A".into()));
        }
        for sd in [self.z.sd, self.w.sd, self.m.sd, self.y.sd] {
            if !(sd > 0.0) {
                return Err(Error::Domain("noise scales must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Latent and exogenous draws of one unit; shared between counterfactual
/// arms by the oracle.
#[derive(Debug, Clone, Copy)]
pub(crate) struct UnitDraw {
    pub x: [f64; 2],
    pub u: f64,
    pub a: f64,
    pub ez: f64,
    pub ew: f64,
    pub em: f64,
    pub ey: f64,
}

pub(crate) fn draw_unit(coef: &DgpCoefficients, chol: &Matrix3<f64>, rng: &mut ChaCha8Rng) -> UnitDraw {
    let mut g = || -> f64 { rng.sample(StandardNormal) };
    let e = [g(), g(), g()];
    let mut v = [0.0; 3];
    for (i, vi) in v.iter_mut().enumerate() {
        *vi = coef.mean[i] + (0..=i).map(|k| chol[(i, k)] * e[k]).sum::<f64>();
    }
    let x = [v[0], v[1]];
    let u = v[2];
    let ex = &coef.exposure;
    let p = expit(ex.intercept + ex.x[0] * x[0] + ex.x[1] * x[1] + ex.u * u);
    let a = f64::from(rng.random::<f64>() < p);
    let mut g = || -> f64 { rng.sample(StandardNormal) };
    UnitDraw {
        x,
        u,
        a,
        ez: g(),
        ew: g(),
        em: g(),
        ey: g(),
    }
}

/// Observed variables of a unit; `m_exposure` overrides the exposure level
/// fed to the mediator equation (the oracle's `M(0)`).
#[inline]
pub(crate) fn realize(coef: &DgpCoefficients, t: &UnitDraw, m_exposure: f64) -> (f64, f64, f64, f64) {
    let z = coef.z.mean(t.a, &t.x, t.u) + coef.z.sd * t.ez;
    let w = coef.w.mean(0.0, &t.x, t.u) + coef.w.sd * t.ew;
    let m = coef.m.mean(m_exposure, &t.x, t.u) + coef.m.sd * t.em;
    let yq = &coef.y;
    let y = yq.intercept + yq.a * t.a + yq.m * m + yq.w * w + yq.x[0] * t.x[0] + yq.x[1] * t.x[1] + yq.u * t.u
        + yq.sd * t.ey;
    (z, w, m, y)
}

/// A simulated sample together with the latent confounder.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    pub u: Vec<f64>,
}

/// Draws `n` units in the order `(X, U) -> A -> Z, W, M -> Y` from stream
/// `stream` of `seed`.
pub fn generate_stream(coef: &DgpCoefficients, n: usize, seed: u64, stream: u64) -> Result<Simulated> {
    if n == 0 {
        return Err(Error::EmptyData("n must be positive".into()));
    }
    coef.validate()?;
    let chol = coef.cholesky()?;
    let mut rng = stream_rng(seed, stream);
    let mut y = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(2 * n);
    let mut w = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    for _ in 0..n {
        let t = draw_unit(coef, &chol, &mut rng);
        let (zi, wi, mi, yi) = realize(coef, &t, t.a);
        y.push(yi);
        a.push(t.a);
        m.push(mi);
        x.extend_from_slice(&t.x);
        w.push(wi);
        z.push(zi);
        u.push(t.u);
    }
    let data = Dataset::new(
        y,
        a,
        m,
        RowMatrix::from_row_major(n, 2, x)?,
        RowMatrix::from_row_major(n, 1, w)?,
        RowMatrix::from_row_major(n, 1, z)?,
    )?;
    Ok(Simulated { data, u })
}

/// `generate_stream` on stream 0.
pub fn generate(coef: &DgpCoefficients, n: usize, seed: u64) -> Result<Simulated> {
    generate_stream(coef, n, seed, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::least_squares;

    #[test]
    fn deterministic_per_seed_and_stream() {
        let c = DgpCoefficients::default();
        let a = generate(&c, 50, 3).unwrap();
        let b = generate(&c, 50, 3).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.u, b.u);
        let other = generate_stream(&c, 50, 3, 1).unwrap();
        assert_ne!(a.data, other.data);
    }

    #[test]
    fn moments_and_outcome_regression_at_scale() {
        let c = DgpCoefficients::default();
        let n = 1_000_000;
        let s = generate(&c, n, 2024).unwrap();
        let d = &s.data;
        let mean_x1 = d.x().column(0).iter().sum::<f64>() / n as f64;
        let mean_u = s.u.iter().sum::<f64>() / n as f64;
        let var_u = s.u.iter().map(|v| (v - mean_u).powi(2)).sum::<f64>() / n as f64;
        assert!((mean_x1 - 0.25).abs() < 0.01, "{mean_x1}");
        assert!((var_u - 1.0).abs() < 0.01, "{var_u}");

        let coef = least_squares(
            n,
            7,
            |i| d.y()[i],
            |i, row| {
                let o = d.obs(i);
                row.copy_from_slice(&[1.0, o.a, o.m, o.w[0], o.x[0], o.x[1], s.u[i]]);
            },
            "check",
        )
        .unwrap();
        let want = [2.0, 2.0, 1.0, 2.0, -1.0, -1.0, -1.0];
        for (g, w) in coef.iter().zip(want) {
            assert!((g - w).abs() < 0.02, "{coef:?}");
        }
    }

    #[test]
    fn rejects_bad_covariance() {
        let mut c = DgpCoefficients::default();
        c.cov[0][2] = 0.9;
        c.cov[2][0] = 0.9;
        assert!(generate(&c, 10, 1).is_err());
        let mut c = DgpCoefficients::default();
        c.cov[0][1] = 0.1;
        assert!(c.validate().is_err());
    }
}
