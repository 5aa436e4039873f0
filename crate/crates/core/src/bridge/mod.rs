//! Parametric confounding bridge functions and their estimating equations.
//!
//! Outcome bridges `h1(w,m,a,x)`, `h0(w,a,x)` are linear; exposure bridges
//! `q0(z,x)`, `q1(z,m,x)` are exponential-linear. Each is fitted by an
//! exactly identified moment equation, `h1 -> h0` and `q0 -> q1`
//! sequentially.

mod basis;
mod fit;
mod params;
pub mod solver;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use basis::{InstrumentBasis, InstrumentFn};
pub use fit::{fit_h0, fit_h0_on, fit_h0_with, fit_h1, fit_h1_on, fit_q0, fit_q0_on, fit_q1, fit_q1_on, fit_q1_with, Fit, FitDiagnostics, MOMENT_TOL};
pub use params::{clamp_exponent, BridgeParams, Dims, H0Params, EXP_CLAMP};

use crate::data::{CovariateForm, Dataset, Obs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeKind {
    H1,
    H0,
    Q0,
    Q1,
}

impl BridgeKind {
    pub const ALL: [BridgeKind; 4] = [BridgeKind::H1, BridgeKind::H0, BridgeKind::Q0, BridgeKind::Q1];
}

impl fmt::Display for BridgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BridgeKind::H1 => "h1",
            BridgeKind::H0 => "h0",
            BridgeKind::Q0 => "q0",
            BridgeKind::Q1 => "q1",
        })
    }
}

impl FromStr for BridgeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "h1" => Ok(BridgeKind::H1),
            "h0" => Ok(BridgeKind::H0),
            "q0" => Ok(BridgeKind::Q0),
            "q1" => Ok(BridgeKind::Q1),
            other => Err(Error::Config(format!("unknown bridge '{other}'"))),
        }
    }
}

/// Evaluation interface shared by parametric, kernel and oracle bridges.
///
/// Observations are passed with their raw covariates; implementations that
/// were fitted on transformed covariates apply the transform themselves.
pub trait BridgeFunctions: Sync {
    fn h1(&self, o: &Obs<'_>, a: f64) -> f64;
    fn h0(&self, o: &Obs<'_>, a: f64) -> f64;
    fn q0(&self, o: &Obs<'_>) -> f64;
    fn q1(&self, o: &Obs<'_>) -> f64;
}

/// Fitted parametric bridges plus the covariate form each one was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricBridges {
    pub params: BridgeParams,
    /// Covariate form for `h1`, `h0`, `q0`, `q1` in that order.
    pub forms: [CovariateForm; 4],
    pub fitted: BTreeSet<BridgeKind>,
    pub diagnostics: BridgeDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BridgeDiagnostics {
    pub h1: Option<FitDiagnostics>,
    pub h0: Option<FitDiagnostics>,
    pub q0: Option<FitDiagnostics>,
    pub q1: Option<FitDiagnostics>,
    /// How many misspecified covariate copies were built.
    pub misspecify_calls: usize,
}

impl ParametricBridges {
    /// Correctly specified bridges with the given parameters.
    pub fn from_params(params: BridgeParams) -> Self {
        Self {
            params,
            forms: [CovariateForm::Raw; 4],
            fitted: BridgeKind::ALL.into_iter().collect(),
            diagnostics: BridgeDiagnostics::default(),
        }
    }

    fn form(&self, k: BridgeKind) -> CovariateForm {
        self.forms[k as usize]
    }

    /// Errors unless every bridge in `kinds` was fitted.
    pub fn require(&self, kinds: &[BridgeKind], who: &str) -> Result<()> {
        for k in kinds {
            if !self.fitted.contains(k) {
                return Err(Error::Precondition(format!("{who} needs a fitted {k} bridge")));
            }
        }
        Ok(())
    }
}

impl BridgeFunctions for ParametricBridges {
    #[inline]
    fn h1(&self, o: &Obs<'_>, a: f64) -> f64 {
        self.params.h1_with(o.w, o.m, a, o.x, self.form(BridgeKind::H1))
    }

    #[inline]
    fn h0(&self, o: &Obs<'_>, a: f64) -> f64 {
        self.params.h0_with(o.w, a, o.x, self.form(BridgeKind::H0))
    }

    #[inline]
    fn q0(&self, o: &Obs<'_>) -> f64 {
        self.params.q0_with(o.z, o.x, self.form(BridgeKind::Q0)).0
    }

    #[inline]
    fn q1(&self, o: &Obs<'_>) -> f64 {
        let q0 = self.params.q0_with(o.z, o.x, self.form(BridgeKind::Q0)).0;
        q0 * self.params.q1_factor_with(o.z, o.m, o.x, self.form(BridgeKind::Q1)).0
    }
}

/// Which bridges to fit and which of them use misspecified covariates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FitPlan {
    pub wanted: BTreeSet<BridgeKind>,
    pub misspecified: BTreeSet<BridgeKind>,
}

impl FitPlan {
    pub fn all() -> Self {
        Self {
            wanted: BridgeKind::ALL.into_iter().collect(),
            misspecified: BTreeSet::new(),
        }
    }

    pub fn with_misspecified(mut self, kinds: impl IntoIterator<Item = BridgeKind>) -> Self {
        self.misspecified = kinds.into_iter().collect();
        self
    }

    /// Adds the first-stage bridges that the wanted ones depend on.
    fn closed(&self) -> BTreeSet<BridgeKind> {
        let mut s = self.wanted.clone();
        if s.contains(&BridgeKind::H0) {
            s.insert(BridgeKind::H1);
        }
        if s.contains(&BridgeKind::Q1) {
            s.insert(BridgeKind::Q0);
        }
        s
    }
}

/// Fits the planned bridges on `d` in the sequential order
/// `q0 -> q1`, then `h1 -> h0`.
///
/// Misspecified bridges are fit on a copy of `d` whose covariates are
/// replaced by `sqrt(|x|) + 3`; that copy is built only when needed.
pub fn fit_bridges(d: &Dataset, plan: &FitPlan, basis: &InstrumentBasis) -> Result<ParametricBridges> {
    let wanted = plan.closed();
    let mut diagnostics = BridgeDiagnostics::default();
    let needs_star = wanted.iter().any(|k| plan.misspecified.contains(k));
    let star = if needs_star {
        diagnostics.misspecify_calls += 1;
        Some(d.misspecify_x()?)
    } else {
        None
    };
    let star = star.as_ref();
    let data_for = |k: BridgeKind| match star {
        Some(s) if plan.misspecified.contains(&k) => s,
        _ => d,
    };
    let form_for = |k: BridgeKind| {
        if plan.misspecified.contains(&k) {
            CovariateForm::Misspecified
        } else {
            CovariateForm::Raw
        }
    };
    let forms = [
        form_for(BridgeKind::H1),
        form_for(BridgeKind::H0),
        form_for(BridgeKind::Q0),
        form_for(BridgeKind::Q1),
    ];
    let dims = Dims {
        p_x: d.p_x(),
        p_w: d.p_w(),
        p_z: d.p_z(),
    };
    let mut params = BridgeParams::zeros(dims);

    if wanted.contains(&BridgeKind::Q0) {
        let f = fit_q0(data_for(BridgeKind::Q0), basis)?;
        params.gamma0 = f.coef;
        diagnostics.q0 = Some(f.diag);
    }
    if wanted.contains(&BridgeKind::Q1) {
        let dq0 = data_for(BridgeKind::Q0);
        let q0 = |i: usize| {
            let o = dq0.obs(i);
            params.q0_with(o.z, o.x, CovariateForm::Raw).0
        };
        let f = fit_q1_with(data_for(BridgeKind::Q1), &q0, basis)?;
        params.gamma1 = f.coef;
        diagnostics.q1 = Some(f.diag);
    }

    if wanted.contains(&BridgeKind::H1) {
        let f = fit_h1(data_for(BridgeKind::H1), basis)?;
        params.beta1 = f.coef;
        diagnostics.h1 = Some(f.diag);
    }
    if wanted.contains(&BridgeKind::H0) {
        let dh1 = data_for(BridgeKind::H1);
        let h1 = |i: usize, a: f64| {
            let o = dh1.obs(i);
            params.h1_with(o.w, o.m, a, o.x, CovariateForm::Raw)
        };
        let f = fit_h0_with(data_for(BridgeKind::H0), &h1, basis)?;
        params.beta0 = f.coef;
        diagnostics.h0 = Some(f.diag);
    }
    Ok(ParametricBridges {
        params,
        forms,
        fitted: wanted,
        diagnostics,
    })
}
