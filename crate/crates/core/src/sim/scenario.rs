//! Misspecification scenarios and Monte Carlo summaries.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate_stream, DgpCoefficients};
use super::truth::analytic_piie;
use crate::bridge::BridgeKind;
use crate::error::{Error, Result};
use crate::estimators::{Method, Pipeline};
use crate::rng::sub_seed;

/// Replication-failure fraction above which a summary is flagged invalid.
pub const MAX_REPLICATION_FAILURES: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    /// Bridges fit on `sqrt(|x|) + 3` covariates.
    pub misspecified: BTreeSet<BridgeKind>,
    pub coef: DgpCoefficients,
}

impl ScenarioSpec {
    /// The four designs: 1 all correct, 2 exposure bridges wrong,
    /// 3 `q1` and `h0` wrong, 4 outcome bridges wrong.
    pub fn standard(id: u8) -> Result<Self> {
        use BridgeKind::*;
        let wrong: &[BridgeKind] = match id {
            1 => &[],
            2 => &[Q1, Q0],
            3 => &[Q1, H0],
            4 => &[H1, H0],
            _ => return Err(Error::Config(format!("scenario must be 1-4, got {id}"))),
        };
        Ok(Self {
            id,
            misspecified: wrong.iter().copied().collect(),
            coef: DgpCoefficients::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub replications: usize,
    pub n: usize,
    pub n_boot: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
}

/// One replication's PIIE estimate and interval for one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: Method,
    pub piie: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub method: Method,
    pub bias: f64,
    pub mse: f64,
    /// Fraction of intervals containing the truth.
    pub coverage: f64,
    pub length: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub scenario: u8,
    pub truth: f64,
    pub replications: usize,
    pub n: usize,
    pub n_boot: usize,
    pub seed: u64,
    pub failed_replications: usize,
    pub failure_fraction: f64,
    /// False when more than 10% of replications failed.
    pub valid: bool,
    /// First failure messages, for diagnosis.
    pub failure_reasons: Vec<String>,
    pub rows: Vec<EstimatorSummary>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

impl McSummary {
    pub fn row(&self, m: Method) -> Option<&EstimatorSummary> {
        self.rows.iter().find(|r| r.method == m)
    }
}

/// Data seed stream of replication `r` is `(seed, r)`; its bootstrap uses
/// a seed derived from `(seed, r)`, so adding replications never changes
/// earlier ones.
pub fn replication_boot_seed(seed: u64, r: usize) -> u64 {
    sub_seed(seed ^ 0xB007_5EED, r as u64)
}

/// Runs `cfg.replications` independent replications of scenario `s`.
///
/// A replication fails as a whole when any bridge fit or its bootstrap
/// fails; failed replications are excluded from every estimator's row.
pub fn run_scenario(s: &ScenarioSpec, cfg: &McConfig) -> Result<McSummary> {
    if cfg.replications == 0 {
        return Err(Error::Config("replications must be >= 1".into()));
    }
    if cfg.n_boot < 2 {
        return Err(Error::Config("scenario runs need B >= 2".into()));
    }
    let pipeline = Pipeline::new(&cfg.methods)?.with_misspecified(s.misspecified.iter().copied());
    let truth = analytic_piie(&s.coef);

    let outcomes: Vec<std::result::Result<Vec<ReplicationRecord>, String>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let run = || -> Result<Vec<ReplicationRecord>> {
                let sim = generate_stream(&s.coef, cfg.n, cfg.seed, r as u64)?;
                let reports = pipeline.estimate(&sim.data, cfg.n_boot, replication_boot_seed(cfg.seed, r))?;
                Ok(reports
                    .into_iter()
                    .map(|rep| ReplicationRecord {
                        replication: r,
                        method: rep.method,
                        piie: rep.piie_hat,
                        ci_lo: rep.ci_lo,
                        ci_hi: rep.ci_hi,
                    })
                    .collect())
            };
            let out = run().map_err(|e| format!("replication {r}: {e}"));
            if (r + 1) % 25 == 0 {
                log::info!("scenario {}: replication {} of {}", s.id, r + 1, cfg.replications);
            }
            out
        })
        .collect();

    let failure_reasons: Vec<String> = outcomes.iter().filter_map(|o| o.as_ref().err().cloned()).collect();
    let records: Vec<ReplicationRecord> = outcomes.into_iter().filter_map(|o| o.ok()).flatten().collect();
    let failed = failure_reasons.len();
    let fraction = failed as f64 / cfg.replications as f64;

    let rows = pipeline
        .methods()
        .iter()
        .map(|&m| summarize(m, records.iter().filter(|r| r.method == m), truth))
        .collect();
    Ok(McSummary {
        scenario: s.id,
        truth,
        replications: cfg.replications,
        n: cfg.n,
        n_boot: cfg.n_boot,
        seed: cfg.seed,
        failed_replications: failed,
        failure_fraction: fraction,
        valid: fraction <= MAX_REPLICATION_FAILURES,
        failure_reasons: failure_reasons.into_iter().take(5).collect(),
        rows,
        records,
    })
}

fn summarize<'a>(method: Method, recs: impl Iterator<Item = &'a ReplicationRecord>, truth: f64) -> EstimatorSummary {
    let (mut k, mut err, mut sq, mut hit, mut len) = (0usize, 0.0, 0.0, 0usize, 0.0);
    for r in recs {
        k += 1;
        let e = r.piie - truth;
        err += e;
        sq += e * e;
        if r.ci_lo <= truth && truth <= r.ci_hi {
            hit += 1;
        }
        len += r.ci_hi - r.ci_lo;
    }
    let kf = k.max(1) as f64;
    let nan_if_empty = |v: f64| if k == 0 { f64::NAN } else { v / kf };
    EstimatorSummary {
        method,
        bias: nan_if_empty(err),
        mse: nan_if_empty(sq),
        coverage: nan_if_empty(hit as f64),
        length: nan_if_empty(len),
        replications: k,
    }
}

/// Writes a Table-1-shaped CSV for several scenario summaries.
pub fn write_table_csv(summaries: &[McSummary], path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "estimator", "bias", "mse", "coverage", "length", "replications", "seed", "config_hash"])?;
    for s in summaries {
        for r in &s.rows {
            w.write_record([
                s.scenario.to_string(),
                r.method.tag().to_string(),
                format!("{:.6}", r.bias),
                format!("{:.6}", r.mse),
                format!("{:.4}", r.coverage),
                format!("{:.6}", r.length),
                r.replications.to_string(),
                s.seed.to_string(),
                config_hash.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_ids() {
        assert!(ScenarioSpec::standard(1).unwrap().misspecified.is_empty());
        let s3 = ScenarioSpec::standard(3).unwrap();
        assert!(s3.misspecified.contains(&BridgeKind::Q1) && s3.misspecified.contains(&BridgeKind::H0));
        assert_eq!(ScenarioSpec::standard(4).unwrap().misspecified.len(), 2);
        assert!(matches!(ScenarioSpec::standard(9), Err(Error::Config(_))));
        assert!(ScenarioSpec::standard(0).is_err());
    }

    #[test]
    fn single_replication_identities() {
        let s = ScenarioSpec::standard(1).unwrap();
        let cfg = McConfig {
            replications: 1,
            n: 1000,
            n_boot: 20,
            seed: 5,
            methods: Method::TABLE.to_vec(),
        };
        let out = run_scenario(&s, &cfg).unwrap();
        assert_eq!(out.failed_replications, 0, "{:?}", out.failure_reasons);
        for r in &out.rows {
            assert!(r.coverage == 0.0 || r.coverage == 1.0);
            assert!((r.mse - r.bias * r.bias).abs() < 1e-15);
        }
    }

    #[test]
    fn earlier_replications_do_not_move() {
        let s = ScenarioSpec::standard(2).unwrap();
        let mut cfg = McConfig {
            replications: 2,
            n: 250,
            n_boot: 10,
            seed: 77,
            methods: vec![Method::POr, Method::PMr],
        };
        let short = run_scenario(&s, &cfg).unwrap();
        cfg.replications = 3;
        let long = run_scenario(&s, &cfg).unwrap();
        let first = |m: &McSummary| m.records.iter().filter(|r| r.replication < 2).copied().collect::<Vec<_>>();
        assert_eq!(first(&short), first(&long));
    }
}
