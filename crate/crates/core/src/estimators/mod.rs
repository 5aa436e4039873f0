//! Estimators of the mediation functional `psi = E[Y(A, M(0))]` and the
//! PIIE `E[Y] - psi`.

mod bootstrap;
mod dr;
mod pipeline;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bootstrap::{bootstrap, bootstrap_statistics, percentile, BootstrapResult, MAX_FAILED_FRACTION};
pub use dr::dr_frontdoor;
pub use pipeline::{EstimateReport, Pipeline, PipelineOutput};

use crate::bridge::{BridgeFunctions, BridgeKind};
use crate::data::{empirical_mean_y, Dataset, Obs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "P-OR")]
    POr,
    #[serde(rename = "P-HYBRID")]
    PHybrid,
    #[serde(rename = "P-IPW")]
    PIpw,
    #[serde(rename = "P-MR")]
    PMr,
    #[serde(rename = "DR")]
    Dr,
    #[serde(rename = "DML-MR")]
    DmlMr,
}

impl Method {
    /// The parametric estimators plus the DR baseline, in reporting order.
    pub const TABLE: [Method; 5] = [Method::Dr, Method::POr, Method::PHybrid, Method::PIpw, Method::PMr];

    pub fn tag(self) -> &'static str {
        match self {
            Method::POr => "P-OR",
            Method::PHybrid => "P-HYBRID",
            Method::PIpw => "P-IPW",
            Method::PMr => "P-MR",
            Method::Dr => "DR",
            Method::DmlMr => "DML-MR",
        }
    }

    /// Bridges a parametric method evaluates.
    pub fn bridges(self) -> &'static [BridgeKind] {
        match self {
            Method::POr => &[BridgeKind::H1, BridgeKind::H0],
            Method::PHybrid => &[BridgeKind::H1, BridgeKind::Q0],
            Method::PIpw => &[BridgeKind::Q0, BridgeKind::Q1],
            Method::PMr => &BridgeKind::ALL,
            Method::Dr | Method::DmlMr => &[],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_uppercase().replace('_', "-");
        match k.as_str() {
            "P-OR" | "POR" => Ok(Method::POr),
            "P-HYBRID" | "PHYBRID" => Ok(Method::PHybrid),
            "P-IPW" | "PIPW" => Ok(Method::PIpw),
            "P-MR" | "PMR" => Ok(Method::PMr),
            "DR" => Ok(Method::Dr),
            "DML-MR" | "DML" => Ok(Method::DmlMr),
            _ => Err(Error::Config(format!("unknown estimator '{s}'"))),
        }
    }
}

/// A point estimate of `psi`.
///
/// `per_obs_if` holds the estimated influence-function contributions for
/// the multiply robust estimators and is empty otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiEstimate {
    pub method: Method,
    pub psi: f64,
    pub per_obs_if: Vec<f64>,
}

impl PsiEstimate {
    fn plain(method: Method, psi: f64) -> Self {
        Self {
            method,
            psi,
            per_obs_if: Vec::new(),
        }
    }
}

fn mean_over(d: &Dataset, f: impl Fn(&Obs<'_>) -> f64) -> f64 {
    let n = d.n();
    (0..n).map(|i| f(&d.obs(i))).sum::<f64>() / n as f64
}

/// `(1/n) sum_i h0(W_i, A_i, X_i)`.
pub fn psi_por<B: BridgeFunctions + ?Sized>(d: &Dataset, b: &B) -> PsiEstimate {
    PsiEstimate::plain(Method::POr, mean_over(d, |o| b.h0(o, o.a)))
}

/// `(1/n) sum_i (1 - A_i) [q0_i h1(W_i, M_i, 1, X_i) + h1(W_i, M_i, 0, X_i)]`.
pub fn psi_phybrid<B: BridgeFunctions + ?Sized>(d: &Dataset, b: &B) -> PsiEstimate {
    let psi = mean_over(d, |o| {
        if o.a == 0.0 {
            b.q0(o) * b.h1(o, 1.0) + b.h1(o, 0.0)
        } else {
            0.0
        }
    });
    PsiEstimate::plain(Method::PHybrid, psi)
}

/// `(1/n) sum_i [A_i q1_i Y_i + (1 - A_i) Y_i]`.
pub fn psi_pipw<B: BridgeFunctions + ?Sized>(d: &Dataset, b: &B) -> PsiEstimate {
    let psi = mean_over(d, |o| if o.a == 1.0 { b.q1(o) * o.y } else { o.y });
    PsiEstimate::plain(Method::PIpw, psi)
}

/// The `psi`-free part of the efficient influence function, so that
/// `eif_value = eif_core - psi`.
#[inline]
pub fn eif_core<B: BridgeFunctions + ?Sized>(o: &Obs<'_>, b: &B) -> f64 {
    let h1_obs = b.h1(o, o.a);
    let h0_obs = b.h0(o, o.a);
    let weight = if o.a == 1.0 { b.q1(o) } else { 1.0 };
    let mut v = weight * (o.y - h1_obs) + h0_obs;
    if o.a == 0.0 {
        let h1_1 = b.h1(o, 1.0);
        let h1_0 = b.h1(o, 0.0);
        v += b.q0(o) * (h1_1 - b.h0(o, 1.0)) + (h1_0 - b.h0(o, 0.0));
    }
    v
}

/// Efficient influence function of `psi` at one observation:
///
/// `(1-A) q0 [h1(W,M,1,X) - h0(W,1,X)] + (1-A) [h1(W,M,0,X) - h0(W,0,X)]
///  + [A q1 + 1 - A] [Y - h1(W,M,A,X)] + h0(W,A,X) - psi`.
#[inline]
pub fn eif_value<B: BridgeFunctions + ?Sized>(o: &Obs<'_>, b: &B, psi: f64) -> f64 {
    eif_core(o, b) - psi
}

/// Multiply robust estimator: the `psi` at which the empirical mean of the
/// efficient influence function is zero.
pub fn psi_pmr<B: BridgeFunctions + ?Sized>(d: &Dataset, b: &B) -> PsiEstimate {
    let core: Vec<f64> = (0..d.n()).map(|i| eif_core(&d.obs(i), b)).collect();
    let psi = core.iter().sum::<f64>() / d.n() as f64;
    PsiEstimate {
        method: Method::PMr,
        psi,
        per_obs_if: core.into_iter().map(|c| c - psi).collect(),
    }
}

/// `E_n[Y] - psi`.
pub fn piie(d: &Dataset, psi: &PsiEstimate) -> f64 {
    empirical_mean_y(d) - psi.psi
}

/// Influence contributions of the PIIE from those of `psi`:
/// `(Y_i - mean Y) - phi_i`.
pub fn piie_influence(d: &Dataset, psi_if: &[f64]) -> Vec<f64> {
    let ybar = empirical_mean_y(d);
    d.y().iter().zip(psi_if).map(|(y, f)| (y - ybar) - f).collect()
}

/// `sd(values) / sqrt(n)` with the `n - 1` variance divisor.
pub fn influence_se(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}
