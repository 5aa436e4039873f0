//! Nonparametric (row-resampling) bootstrap with percentile intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Above this fraction of failed replicates the bootstrap errors.
pub const MAX_FAILED_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Successful replicates in replicate-index order.
    pub replicates: Vec<f64>,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Standard deviation of the replicates (`n - 1` divisor).
    pub se: f64,
    pub n_failed: usize,
    /// Requested replicate count `B = replicates.len() + n_failed`.
    pub n_boot: usize,
}

impl BootstrapResult {
    fn from_replicates(replicates: Vec<f64>, n_failed: usize, n_boot: usize) -> Self {
        let mut sorted = replicates.clone();
        sorted.sort_by(f64::total_cmp);
        let k = replicates.len() as f64;
        let mean = replicates.iter().sum::<f64>() / k;
        let var = if replicates.len() > 1 {
            replicates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        Self {
            ci_lo: percentile(&sorted, 0.025),
            ci_hi: percentile(&sorted, 0.975),
            se: var.sqrt(),
            replicates,
            n_failed,
            n_boot,
        }
    }
}

/// Linear-interpolation quantile (Hyndman-Fan type 7) of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws `n` row indices with replacement from stream `b` of `seed`.
pub(crate) fn resample_indices(n: usize, seed: u64, b: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, b);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bootstraps a vector-valued statistic with `k` components.
///
/// Replicate `b` resamples rows using stream `b` of `seed`, so the result
/// does not depend on thread scheduling. A replicate fails as a whole if
/// `stat` errors or returns a non-finite component; failed replicates are
/// excluded and counted. More than `MAX_FAILED_FRACTION` failures is an
/// error.
pub fn bootstrap_statistics<F>(d: &Dataset, k: usize, stat: F, n_boot: usize, seed: u64) -> Result<Vec<BootstrapResult>>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    if n_boot < 2 {
        return Err(Error::Config(format!("bootstrap needs B >= 2, got {n_boot}")));
    }
    let n = d.n();
    let draws: Vec<std::result::Result<Vec<f64>, String>> = (0..n_boot as u64)
        .into_par_iter()
        .map(|b| {
            let sample = d.select(&resample_indices(n, seed, b));
            match stat(&sample) {
                Ok(v) if v.len() == k && v.iter().all(|x| x.is_finite()) => Ok(v),
                Ok(v) if v.len() != k => Err(format!("statistic returned {} values, expected {k}", v.len())),
                Ok(_) => Err("non-finite statistic".to_string()),
                Err(e) => Err(e.to_string()),
            }
        })
        .collect();

    let failed: Vec<&String> = draws.iter().filter_map(|r| r.as_ref().err()).collect();
    let n_failed = failed.len();
    if n_failed as f64 > MAX_FAILED_FRACTION * n_boot as f64 || n_failed == n_boot {
        return Err(Error::BootstrapUnstable {
            failed: n_failed,
            total: n_boot,
            reason: failed.first().map(|s| s.to_string()).unwrap_or_default(),
        });
    }
    let ok: Vec<&Vec<f64>> = draws.iter().filter_map(|r| r.as_ref().ok()).collect();
    Ok((0..k)
        .map(|j| BootstrapResult::from_replicates(ok.iter().map(|v| v[j]).collect(), n_failed, n_boot))
        .collect())
}

/// Bootstraps a scalar statistic.
pub fn bootstrap<F>(d: &Dataset, stat: F, n_boot: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    let mut out = bootstrap_statistics(d, 1, |s| stat(s).map(|v| vec![v]), n_boot, seed)?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{empirical_mean_y, RowMatrix};

    fn toy(n: usize) -> Dataset {
        let col = |f: fn(usize) -> f64| RowMatrix::from_columns(&[(0..n).map(f).collect()], n).unwrap();
        Dataset::new(
            (0..n).map(|i| (i as f64).sin() * 3.0).collect(),
            (0..n).map(|i| (i % 2) as f64).collect(),
            (0..n).map(|i| i as f64 * 0.1).collect(),
            col(|i| (i as f64).cos()),
            col(|i| i as f64 / 7.0),
            col(|i| (i * i % 5) as f64),
        )
        .unwrap()
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert!((percentile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((percentile(&v, 0.025) - 1.075).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let d = toy(40);
        let stat = |s: &Dataset| Ok(empirical_mean_y(s));
        let a = bootstrap(&d, stat, 64, 11).unwrap();
        let b = bootstrap(&d, stat, 64, 11).unwrap();
        assert_eq!(a, b);
        let c = bootstrap(&d, stat, 64, 12).unwrap();
        assert_ne!(a.replicates, c.replicates);
        assert!(a.ci_lo <= a.ci_hi);
        assert_eq!(a.replicates.len() + a.n_failed, a.n_boot);
    }

    #[test]
    fn constant_rows_give_degenerate_interval() {
        let d = toy(1).select(&[0; 25]);
        let point = empirical_mean_y(&d);
        let r = bootstrap(&d, |s| Ok(empirical_mean_y(s)), 30, 1).unwrap();
        assert_eq!(r.ci_lo, point);
        assert_eq!(r.ci_hi, point);
        assert_eq!(r.se, 0.0);
    }

    #[test]
    fn failure_accounting_and_threshold() {
        let d = toy(30);
        // fails when the resample has fewer than 14 exposed rows
        let picky = |s: &Dataset| {
            if s.n_exposed() < 14 {
                Err(Error::Solver {
                    context: "toy".into(),
                    iterations: 0,
                    residual: 1.0,
                })
            } else {
                Ok(empirical_mean_y(s))
            }
        };
        match bootstrap(&d, picky, 200, 3) {
            Ok(r) => {
                assert!(r.n_failed as f64 <= 0.2 * 200.0);
                assert_eq!(r.replicates.len() + r.n_failed, 200);
            }
            Err(Error::BootstrapUnstable { failed, total, .. }) => {
                assert_eq!(total, 200);
                assert!(failed > 40);
            }
            Err(e) => panic!("{e}"),
        }
        let always = |_: &Dataset| -> Result<f64> { Err(Error::Precondition("no".into())) };
        assert!(matches!(bootstrap(&d, always, 10, 3), Err(Error::BootstrapUnstable { failed: 10, .. })));
        assert!(matches!(bootstrap(&d, |s| Ok(empirical_mean_y(s)), 1, 3), Err(Error::Config(_))));
    }
}
