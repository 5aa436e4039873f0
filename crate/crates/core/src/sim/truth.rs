//! Closed-form bridge parameters and counterfactual oracles for the
//! linear-Gaussian design.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{draw_unit, realize, DgpCoefficients};
use crate::bridge::{BridgeParams, Dims, H0Params};
use crate::error::{Error, Result};
use crate::linalg::expit;
use crate::rng::stream_rng;

/// Bridge parameters that solve the population integral equations.
///
/// Obtained by integrating `U` out of the linear-Gaussian equations:
/// matching the `U` coefficient of `E[h | U, ...]` pins the proxy slope,
/// and for the exposure bridges the Gaussian moment generating function
/// of `Z` gives the exponential-linear form.
pub fn true_bridges(c: &DgpCoefficients) -> Result<BridgeParams> {
    c.validate()?;
    let (y, w, m, z, e) = (&c.y, &c.w, &c.m, &c.z, &c.exposure);
    if w.u == 0.0 || z.u == 0.0 {
        return Err(Error::Domain("proxies must load on U for the bridges to exist".into()));
    }
    let dims = Dims { p_x: 2, p_w: 1, p_z: 1 };

    // h1 = b0 + bw W + bm M + ba A + bx'X
    let bw = y.w + y.u / w.u;
    let bm = y.m;
    let ba = y.a;
    let bx: Vec<f64> = (0..2).map(|k| y.x[k] + (y.w - bw) * w.x[k]).collect();
    let b0 = y.intercept + (y.w - bw) * w.intercept;
    let beta1 = vec![b0, bw, bm, ba, bx[0], bx[1]];

    // h0 = c0 + cw W + ca A + cx'X, integrating M over the A = 0 law
    let cw = bw + bm * m.u / w.u;
    let cx: Vec<f64> = (0..2).map(|k| bx[k] + (bw - cw) * w.x[k] + bm * m.x[k]).collect();
    let c0 = b0 + (bw - cw) * w.intercept + bm * m.intercept;
    let beta0: H0Params = BridgeParams::h0_from_unified(dims, &[c0, cw, ba, cx[0], cx[1]])?;

    // q0 = exp{-(g0 + gz Z + gx'X)} with E[q0 | U, A=0, X] = odds(A=1 | U, X)
    let s2 = z.sd * z.sd;
    let gz = -e.u / z.u;
    let gx: Vec<f64> = (0..2).map(|k| -e.x[k] - gz * z.x[k]).collect();
    let g0 = -e.intercept - gz * z.intercept + gz * gz * s2 / 2.0;
    let gamma0 = vec![g0, gz, gx[0], gx[1]];

    // q1 / q0 = exp{k0 + kz Z + km M + kx'X}: E[q1 | U, A=1, M, X] must equal
    // the mediator density ratio f(M | A=0, U, X) / f(M | A=1, U, X)
    let v = m.sd * m.sd;
    let km = -m.a / v;
    let kz = m.a * m.u / (v * z.u); // net Z slope of q1
    let kx: Vec<f64> = (0..2).map(|k| m.a * m.x[k] / v - kz * z.x[k]).collect();
    let k0 = m.a * m.a / (2.0 * v) + m.a * m.intercept / v - kz * (z.intercept + z.a) - kz * kz * s2 / 2.0;
    let gamma1 = vec![k0 + g0, kz + gz, km, kx[0] + gx[0], kx[1] + gx[1]];

    let p = BridgeParams {
        dims,
        beta1,
        beta0,
        gamma0,
        gamma1,
    };
    p.validate()?;
    Ok(p)
}

/// `E[A]` by quadrature: the exposure linear predictor is Gaussian.
pub fn expected_exposure(c: &DgpCoefficients) -> f64 {
    let e = &c.exposure;
    let coef = [e.x[0], e.x[1], e.u];
    let mean = e.intercept + (0..3).map(|i| coef[i] * c.mean[i]).sum::<f64>();
    let var: f64 = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| coef[i] * coef[j] * c.cov[i][j])
        .sum();
    if var == 0.0 {
        return expit(mean);
    }
    let sd = var.sqrt();
    // trapezoid on +-12 sd; the integrand is smooth and the tails negligible
    let k = 24_000;
    let h = 24.0 / k as f64;
    let mut total = 0.0;
    for i in 0..=k {
        let t = -12.0 + i as f64 * h;
        let wgt = if i == 0 || i == k { 0.5 } else { 1.0 };
        total += wgt * expit(mean + sd * t) * (-0.5 * t * t).exp();
    }
    total * h / (2.0 * std::f64::consts::PI).sqrt()
}

/// PIIE implied by the linear pathway: `M(a) - M(0) = m.a * a` enters `Y`
/// with coefficient `y.m`, so `PIIE = y.m * m.a * E[A]`.
pub fn analytic_piie(c: &DgpCoefficients) -> f64 {
    c.y.m * c.m.a * expected_exposure(c)
}

/// `E[Y]` in closed form.
pub fn analytic_mean_y(c: &DgpCoefficients) -> f64 {
    let ea = expected_exposure(c);
    let lin = |icpt: f64, a: f64, x: [f64; 2], u: f64| icpt + a * ea + x[0] * c.mean[0] + x[1] * c.mean[1] + u * c.mean[2];
    let em = lin(c.m.intercept, c.m.a, c.m.x, c.m.u);
    let ew = lin(c.w.intercept, 0.0, c.w.x, c.w.u);
    let y = &c.y;
    lin(y.intercept, y.a, y.x, y.u) + y.m * em + y.w * ew
}

/// Monte Carlo counterfactual truth with its standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleTruth {
    pub psi: f64,
    pub piie: f64,
    pub mean_y: f64,
    pub mean_a: f64,
    pub se_mean_y: f64,
    pub se_psi: f64,
    pub se_piie: f64,
    pub se_mean_a: f64,
    pub draws: usize,
}

const ORACLE_CHUNK: usize = 100_000;

/// Simulates `Y(A, M(A))` and `Y(A, M(0))` for `draws` units with the
/// exogenous noise shared between the two arms.
pub fn oracle_truth(c: &DgpCoefficients, draws: usize, seed: u64) -> Result<OracleTruth> {
    if draws < 2 {
        return Err(Error::Precondition("oracle needs at least two draws".into()));
    }
    c.validate()?;
    let chol = c.cholesky()?;
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    // per chunk: sums and sums of squares of (Y(A,M(A)), Y(A,M(0)), difference, A)
    let sums: Vec<[f64; 8]> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng: ChaCha8Rng = stream_rng(seed, k as u64);
            let len = ORACLE_CHUNK.min(draws - k * ORACLE_CHUNK);
            let mut s = [0.0; 8];
            for _ in 0..len {
                let t = draw_unit(c, &chol, &mut rng);
                let (_, _, _, y_nat) = realize(c, &t, t.a);
                let (_, _, _, y_cf) = realize(c, &t, 0.0);
                let diff = y_nat - y_cf;
                for (j, v) in [y_nat, y_cf, diff, t.a].into_iter().enumerate() {
                    s[j] += v;
                    s[4 + j] += v * v;
                }
            }
            s
        })
        .collect();
    let mut tot = [0.0; 8];
    for s in &sums {
        for j in 0..8 {
            tot[j] += s[j];
        }
    }
    let n = draws as f64;
    let mean = |j: usize| tot[j] / n;
    let se = |j: usize| {
        let mu = mean(j);
        ((tot[4 + j] / n - mu * mu).max(0.0) * n / (n - 1.0) / n).sqrt()
    };
    Ok(OracleTruth {
        psi: mean(1),
        piie: mean(2),
        mean_y: mean(0),
        mean_a: mean(3),
        se_mean_y: se(0),
        se_psi: se(1),
        se_piie: se(2),
        se_mean_a: se(3),
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_bridges_match_published_coefficients() {
        let p = true_bridges(&DgpCoefficients::default()).unwrap();
        let want1 = [1.5, 11.0 / 3.0, 1.0, 2.0, -4.0 / 3.0, -4.0 / 3.0];
        for (g, w) in p.beta1.iter().zip(want1) {
            assert!((g - w).abs() < 1e-12);
        }
        let want0 = BridgeParams::h0_from_unified(p.dims, &[2.25, 7.0 / 6.0, 2.0, -4.0 / 3.0, -4.0 / 3.0]).unwrap();
        for (g, w) in p.beta0.arm0.iter().chain(&p.beta0.arm1).zip(want0.arm0.iter().chain(&want0.arm1)) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn exposure_bridges_closed_form() {
        let p = true_bridges(&DgpCoefficients::default()).unwrap();
        let want0 = [0.16, -0.4, 0.58, 0.58];
        let want1 = [0.24775, 0.05, 0.3, 0.64, 0.64];
        for (g, w) in p.gamma0.iter().zip(want0) {
            assert!((g - w).abs() < 1e-12, "{:?}", p.gamma0);
        }
        for (g, w) in p.gamma1.iter().zip(want1) {
            assert!((g - w).abs() < 1e-12, "{:?}", p.gamma1);
        }
    }

    #[test]
    fn exposure_mean_quadrature() {
        let c = DgpCoefficients::default();
        let ea = expected_exposure(&c);
        // probit-style approximation E[expit(N(mu, s2))] ~ expit(mu / sqrt(1 + pi s2 / 8))
        let approx = expit(-0.25 / (1.0 + std::f64::consts::PI * 0.325 / 8.0).sqrt());
        assert!((ea - approx).abs() < 2e-3, "{ea} vs {approx}");
        let mut flat = c.clone();
        flat.exposure = super::super::dgp::ExposureEq {
            intercept: 0.0,
            x: [0.0, 0.0],
            u: 0.0,
        };
        assert!((expected_exposure(&flat) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_agrees_with_pathway_argument() {
        let c = DgpCoefficients::default();
        let o = oracle_truth(&c, 400_000, 9).unwrap();
        assert!((o.piie - (-0.3 * o.mean_a)).abs() < 1e-12);
        assert!((o.piie - analytic_piie(&c)).abs() < 4.0 * o.se_piie);
        assert!((o.psi + o.piie - o.mean_y).abs() < 1e-9);
        assert!((o.mean_y - analytic_mean_y(&c)).abs() < 4.0 * o.se_mean_y);

        let mut none = c.clone();
        none.m.a = 0.0;
        assert_eq!(oracle_truth(&none, 10_000, 1).unwrap().piie, 0.0);

        let mut doubled = c.clone();
        doubled.y.m *= 2.0;
        let d = oracle_truth(&doubled, 400_000, 9).unwrap();
        assert!((d.piie - 2.0 * o.piie).abs() < 1e-9);
    }
}
