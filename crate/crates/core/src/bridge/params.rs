use serde::{Deserialize, Serialize};

use crate::data::{misspecify_coordinate, CovariateForm};
use crate::error::{Error, Result};

/// Bound applied to the exponent of the exposure bridges before `exp`.
pub const EXP_CLAMP: f64 = 50.0;

/// Clamps an exponent to `[-EXP_CLAMP, EXP_CLAMP]`; the flag reports
/// whether clamping happened.
#[inline]
pub fn clamp_exponent(e: f64) -> (f64, bool) {
    if e > EXP_CLAMP {
        (EXP_CLAMP, true)
    } else if e < -EXP_CLAMP {
        (-EXP_CLAMP, true)
    } else {
        (e, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub p_x: usize,
    pub p_w: usize,
    pub p_z: usize,
}

impl Dims {
    pub fn beta1(&self) -> usize {
        3 + self.p_w + self.p_x
    }
    pub fn beta0_arm(&self) -> usize {
        1 + self.p_w + self.p_x
    }
    pub fn gamma0(&self) -> usize {
        1 + self.p_z + self.p_x
    }
    pub fn gamma1(&self) -> usize {
        2 + self.p_z + self.p_x
    }
}

/// Outcome bridge `h0`, partitioned by exposure level:
/// `h0(w, a, x) = a h0(w, x; arm1) + (1 - a) h0(w, x; arm0)`,
/// each arm laid out as `(intercept, w-slopes, x-slopes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H0Params {
    pub arm0: Vec<f64>,
    pub arm1: Vec<f64>,
}

/// Parameters of the four parametric confounding bridges.
///
/// Layouts (with `p_w`, `p_z`, `p_x` slopes):
/// * `beta1`  = `(b0, b_w.., b_m, b_a, b_x..)` for
///   `h1(w,m,a,x) = b0 + b_w'w + b_m m + b_a a + b_x'x`;
/// * `beta0`  = per-arm `(c0, c_w.., c_x..)`;
/// * `gamma0` = `(g0, g_z.., g_x..)` for `q0(z,x) = exp{-(g0 + g_z'z + g_x'x)}`;
/// * `gamma1` = `(k0, k_z.., k_m, k_x..)` for
///   `q1(z,m,x) = q0(z,x) exp{k0 + k_z'z + k_m m + k_x'x}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeParams {
    pub dims: Dims,
    pub beta1: Vec<f64>,
    pub beta0: H0Params,
    pub gamma0: Vec<f64>,
    pub gamma1: Vec<f64>,
}

impl BridgeParams {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            beta1: vec![0.0; dims.beta1()],
            beta0: H0Params {
                arm0: vec![0.0; dims.beta0_arm()],
                arm1: vec![0.0; dims.beta0_arm()],
            },
            gamma0: vec![0.0; dims.gamma0()],
            gamma1: vec![0.0; dims.gamma1()],
        }
    }

    /// Builds `beta0` from the unpartitioned form
    /// `(c0, c_w.., c_a, c_x..)` of `h0(w,a,x) = c0 + c_w'w + c_a a + c_x'x`.
    pub fn h0_from_unified(dims: Dims, unified: &[f64]) -> Result<H0Params> {
        if unified.len() != 2 + dims.p_w + dims.p_x {
            return Err(Error::Dimension(format!(
                "unified beta0 needs {} entries, got {}",
                2 + dims.p_w + dims.p_x,
                unified.len()
            )));
        }
        let pw = dims.p_w;
        let c0 = unified[0];
        let cw = &unified[1..1 + pw];
        let ca = unified[1 + pw];
        let cx = &unified[2 + pw..];
        let arm = |icpt: f64| {
            let mut v = vec![icpt];
            v.extend_from_slice(cw);
            v.extend_from_slice(cx);
            v
        };
        Ok(H0Params {
            arm0: arm(c0),
            arm1: arm(c0 + ca),
        })
    }

    /// Checks every vector against `dims` and for finiteness.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let checks = [
            ("beta1", self.beta1.len(), d.beta1()),
            ("beta0.arm0", self.beta0.arm0.len(), d.beta0_arm()),
            ("beta0.arm1", self.beta0.arm1.len(), d.beta0_arm()),
            ("gamma0", self.gamma0.len(), d.gamma0()),
            ("gamma1", self.gamma1.len(), d.gamma1()),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Dimension(format!("{name}: expected {want}, got {got}")));
            }
        }
        let all = self
            .beta1
            .iter()
            .chain(&self.beta0.arm0)
            .chain(&self.beta0.arm1)
            .chain(&self.gamma0)
            .chain(&self.gamma1);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite bridge parameter".into()));
        }
        Ok(())
    }

    fn check_len(&self, name: &str, got: usize, want: usize) -> Result<()> {
        if got == want {
            Ok(())
        } else {
            Err(Error::Dimension(format!("{name}: expected length {want}, got {got}")))
        }
    }

    pub fn eval_h1(&self, w: &[f64], m: f64, a: f64, x: &[f64]) -> Result<f64> {
        self.check_len("w", w.len(), self.dims.p_w)?;
        self.check_len("x", x.len(), self.dims.p_x)?;
        Ok(self.h1_with(w, m, a, x, CovariateForm::Raw))
    }

    pub fn eval_h0(&self, w: &[f64], a: f64, x: &[f64]) -> Result<f64> {
        self.check_len("w", w.len(), self.dims.p_w)?;
        self.check_len("x", x.len(), self.dims.p_x)?;
        Ok(self.h0_with(w, a, x, CovariateForm::Raw))
    }

    pub fn eval_q0(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        self.check_len("z", z.len(), self.dims.p_z)?;
        self.check_len("x", x.len(), self.dims.p_x)?;
        Ok(self.q0_with(z, x, CovariateForm::Raw).0)
    }

    pub fn eval_q1(&self, z: &[f64], m: f64, x: &[f64]) -> Result<f64> {
        self.check_len("z", z.len(), self.dims.p_z)?;
        self.check_len("x", x.len(), self.dims.p_x)?;
        let (q0, _) = self.q0_with(z, x, CovariateForm::Raw);
        Ok(q0 * self.q1_factor_with(z, m, x, CovariateForm::Raw).0)
    }

    #[inline]
    pub(crate) fn h1_with(&self, w: &[f64], m: f64, a: f64, x: &[f64], form: CovariateForm) -> f64 {
        let b = &self.beta1;
        let pw = self.dims.p_w;
        b[0] + dot(&b[1..1 + pw], w) + b[1 + pw] * m + b[2 + pw] * a + xdot(&b[3 + pw..], x, form)
    }

    #[inline]
    pub(crate) fn h0_arm_with(&self, arm: &[f64], w: &[f64], x: &[f64], form: CovariateForm) -> f64 {
        let pw = self.dims.p_w;
        arm[0] + dot(&arm[1..1 + pw], w) + xdot(&arm[1 + pw..], x, form)
    }

    #[inline]
    pub(crate) fn h0_with(&self, w: &[f64], a: f64, x: &[f64], form: CovariateForm) -> f64 {
        let v1 = self.h0_arm_with(&self.beta0.arm1, w, x, form);
        let v0 = self.h0_arm_with(&self.beta0.arm0, w, x, form);
        a * v1 + (1.0 - a) * v0
    }

    /// `q0` and whether its exponent was clamped.
    #[inline]
    pub(crate) fn q0_with(&self, z: &[f64], x: &[f64], form: CovariateForm) -> (f64, bool) {
        let g = &self.gamma0;
        let pz = self.dims.p_z;
        let lin = g[0] + dot(&g[1..1 + pz], z) + xdot(&g[1 + pz..], x, form);
        let (e, c) = clamp_exponent(-lin);
        (e.exp(), c)
    }

    /// The multiplicative factor `exp{gamma1 . (1,z,m,x)}` of `q1`.
    #[inline]
    pub(crate) fn q1_factor_with(&self, z: &[f64], m: f64, x: &[f64], form: CovariateForm) -> (f64, bool) {
        let g = &self.gamma1;
        let pz = self.dims.p_z;
        let lin = g[0] + dot(&g[1..1 + pz], z) + g[1 + pz] * m + xdot(&g[2 + pz..], x, form);
        let (e, c) = clamp_exponent(lin);
        (e.exp(), c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[inline]
fn xdot(coef: &[f64], x: &[f64], form: CovariateForm) -> f64 {
    match form {
        CovariateForm::Raw => dot(coef, x),
        CovariateForm::Misspecified => coef
            .iter()
            .zip(x)
            .map(|(c, v)| c * misspecify_coordinate(*v))
            .sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims { p_x: 2, p_w: 1, p_z: 1 }
    }

    fn dgp_params() -> BridgeParams {
        let mut p = BridgeParams::zeros(dims());
        p.beta1 = vec![1.5, 11.0 / 3.0, 1.0, 2.0, -4.0 / 3.0, -4.0 / 3.0];
        p.beta0 = BridgeParams::h0_from_unified(dims(), &[2.25, 7.0 / 6.0, 2.0, -4.0 / 3.0, -4.0 / 3.0]).unwrap();
        p.gamma0 = vec![0.16, -0.4, 0.58, 0.58];
        p
    }

    #[test]
    fn h1_at_origin_and_unit_point() {
        let p = dgp_params();
        assert_eq!(p.eval_h1(&[0.0], 0.0, 0.0, &[0.0, 0.0]).unwrap(), 1.5);
        let v = p.eval_h1(&[1.0], 1.0, 1.0, &[1.0, 1.0]).unwrap();
        assert!((v - 5.5).abs() < 1e-12);
        let z = BridgeParams::zeros(dims());
        assert_eq!(z.eval_h1(&[3.0], -2.0, 1.0, &[5.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn h0_arms() {
        let p = dgp_params();
        assert_eq!(p.eval_h0(&[0.0], 0.0, &[0.0, 0.0]).unwrap(), 2.25);
        assert_eq!(p.eval_h0(&[0.0], 1.0, &[0.0, 0.0]).unwrap(), 4.25);
        assert_eq!(BridgeParams::zeros(dims()).eval_h0(&[1.0], 1.0, &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn q0_values_and_clamp() {
        let p = dgp_params();
        let v = p.eval_q0(&[0.0], &[0.0, 0.0]).unwrap();
        assert!((v - (-0.16f64).exp()).abs() < 1e-15);
        assert!((v - 0.8521).abs() < 1e-4);
        assert_eq!(BridgeParams::zeros(dims()).eval_q0(&[4.0], &[1.0, 1.0]).unwrap(), 1.0);

        let mut big = BridgeParams::zeros(dims());
        big.gamma0[0] = 1000.0;
        assert_eq!(big.eval_q0(&[0.0], &[0.0, 0.0]).unwrap(), (-50.0f64).exp());
        assert!(big.q0_with(&[0.0], &[0.0, 0.0], CovariateForm::Raw).1);
    }

    #[test]
    fn q1_reduces_to_q0_when_gamma1_zero() {
        let p = dgp_params();
        for (z, m, x) in [(0.3, 1.0, [0.1, 0.2]), (-2.0, 0.0, [1.0, -1.0])] {
            assert_eq!(p.eval_q1(&[z], m, &x).unwrap(), p.eval_q0(&[z], &x).unwrap());
        }
        assert_eq!(BridgeParams::zeros(dims()).eval_q1(&[1.0], 2.0, &[0.0, 3.0]).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let p = dgp_params();
        assert!(p.eval_h1(&[0.0, 1.0], 0.0, 0.0, &[0.0, 0.0]).is_err());
        assert!(p.eval_q0(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = dgp_params();
        let back = BridgeParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
        let mut bad = p.clone();
        bad.gamma1.pop();
        assert!(BridgeParams::from_json(&bad.to_json().unwrap()).is_err());
    }
}
