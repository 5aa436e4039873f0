//! Full estimation pipeline: bridge fits, point estimates, bootstrap.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    bootstrap_statistics, dr_frontdoor, influence_se, piie_influence, psi_phybrid, psi_pipw, psi_pmr, psi_por,
    Method, PsiEstimate,
};
use crate::bridge::{fit_bridges, BridgeKind, FitDiagnostics, FitPlan, InstrumentBasis, ParametricBridges};
use crate::data::{empirical_mean_y, Dataset};
use crate::error::{Error, Result};

/// A set of estimators sharing one set of bridge fits.
#[derive(Debug, Clone)]
pub struct Pipeline {
    methods: Vec<Method>,
    misspecified: BTreeSet<BridgeKind>,
    basis: InstrumentBasis,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub mean_y: f64,
    /// In the order the methods were requested.
    pub estimates: Vec<PsiEstimate>,
    pub bridges: Option<ParametricBridges>,
}

impl PipelineOutput {
    pub fn piie(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| self.mean_y - e.psi).collect()
    }
}

impl Pipeline {
    /// Methods are deduplicated, keeping first occurrence. The cross-fitted
    /// estimator is not bootstrappable and lives in `dml`.
    pub fn new(methods: &[Method]) -> Result<Self> {
        if methods.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        let mut seen = BTreeSet::new();
        let mut list = Vec::new();
        for &m in methods {
            if m == Method::DmlMr {
                return Err(Error::Config("DML-MR is run by the cross-fitting engine, not the parametric pipeline".into()));
            }
            if seen.insert(m) {
                list.push(m);
            }
        }
        Ok(Self {
            methods: list,
            misspecified: BTreeSet::new(),
            basis: InstrumentBasis::default(),
        })
    }

    /// Bridges in `kinds` are fit on `sqrt(|x|) + 3` covariates.
    pub fn with_misspecified(mut self, kinds: impl IntoIterator<Item = BridgeKind>) -> Self {
        self.misspecified = kinds.into_iter().collect();
        self
    }

    pub fn with_basis(mut self, basis: InstrumentBasis) -> Self {
        self.basis = basis;
        self
    }

    pub fn methods(&self) -> &[Method] {
        &self.methods
    }

    pub fn fit_plan(&self) -> FitPlan {
        FitPlan {
            wanted: self.methods.iter().flat_map(|m| m.bridges().iter().copied()).collect(),
            misspecified: self.misspecified.clone(),
        }
    }

    /// Fits the needed bridges once and evaluates every method.
    pub fn run(&self, d: &Dataset) -> Result<PipelineOutput> {
        let plan = self.fit_plan();
        let bridges = if plan.wanted.is_empty() {
            None
        } else {
            Some(fit_bridges(d, &plan, &self.basis)?)
        };
        let estimates = self
            .methods
            .iter()
            .map(|&m| match (m, &bridges) {
                (Method::Dr, _) => dr_frontdoor(d),
                (Method::POr, Some(b)) => Ok(psi_por(d, b)),
                (Method::PHybrid, Some(b)) => Ok(psi_phybrid(d, b)),
                (Method::PIpw, Some(b)) => Ok(psi_pipw(d, b)),
                (Method::PMr, Some(b)) => Ok(psi_pmr(d, b)),
                _ => unreachable!("plan covers every parametric method"),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PipelineOutput {
            mean_y: empirical_mean_y(d),
            estimates,
            bridges,
        })
    }

    /// PIIE of each method; the bootstrap statistic.
    pub fn piie_values(&self, d: &Dataset) -> Result<Vec<f64>> {
        Ok(self.run(d)?.piie())
    }

    /// Point estimates plus percentile-bootstrap inference.
    ///
    /// With `n_boot = 0` only the multiply robust estimator can report a
    /// standard error (from its influence function, with a Wald interval).
    pub fn estimate(&self, d: &Dataset, n_boot: usize, seed: u64) -> Result<Vec<EstimateReport>> {
        let out = self.run(d)?;
        let boot = if n_boot > 0 {
            Some(bootstrap_statistics(d, self.methods.len(), |s| self.piie_values(s), n_boot, seed)?)
        } else {
            if let Some(m) = self.methods.iter().find(|m| **m != Method::PMr) {
                return Err(Error::Config(format!("{m} needs a bootstrap (B >= 2) for inference")));
            }
            None
        };

        let mut common = BTreeMap::new();
        common.insert("n".to_string(), d.n() as f64);
        common.insert("dropped_rows".to_string(), d.dropped_rows() as f64);
        if let Some(b) = &out.bridges {
            let diag = &b.diagnostics;
            for (name, fd) in [("h1", &diag.h1), ("h0", &diag.h0), ("q0", &diag.q0), ("q1", &diag.q1)] {
                if let Some(FitDiagnostics {
                    residual,
                    iterations,
                    clamps,
                    ..
                }) = fd
                {
                    common.insert(format!("{name}_moment_residual"), *residual);
                    common.insert(format!("{name}_iterations"), *iterations as f64);
                    common.insert(format!("{name}_clamps"), *clamps as f64);
                }
            }
        }

        let piie = out.piie();
        Ok(out
            .estimates
            .iter()
            .enumerate()
            .map(|(j, est)| {
                let mut diagnostics = common.clone();
                let (se, ci_lo, ci_hi, nb) = match &boot {
                    Some(rs) => {
                        let r = &rs[j];
                        diagnostics.insert("boot_failed".into(), r.n_failed as f64);
                        (r.se, r.ci_lo, r.ci_hi, r.n_boot)
                    }
                    None => {
                        let se = influence_se(&piie_influence(d, &est.per_obs_if));
                        (se, piie[j] - 1.959964 * se, piie[j] + 1.959964 * se, 0)
                    }
                };
                if !est.per_obs_if.is_empty() {
                    diagnostics.insert("if_se".into(), influence_se(&piie_influence(d, &est.per_obs_if)));
                    let m = est.per_obs_if.iter().sum::<f64>() / est.per_obs_if.len() as f64;
                    diagnostics.insert("if_mean".into(), m);
                }
                EstimateReport {
                    method: est.method,
                    psi_hat: est.psi,
                    piie_hat: piie[j],
                    se,
                    ci_lo,
                    ci_hi,
                    n_boot: nb,
                    diagnostics,
                }
            })
            .collect())
    }
}

/// Point estimate and interval for one method.
///
/// `se` and the interval refer to the PIIE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub psi_hat: f64,
    pub piie_hat: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_boot: usize,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimateReport {
    pub const CSV_HEADER: [&'static str; 6] = ["method", "psi", "piie", "se", "ci_lo", "ci_hi"];

    pub fn csv_record(&self) -> [String; 6] {
        [
            self.method.tag().to_string(),
            format!("{:?}", self.psi_hat),
            format!("{:?}", self.piie_hat),
            format!("{:?}", self.se),
            format!("{:?}", self.ci_lo),
            format!("{:?}", self.ci_hi),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
