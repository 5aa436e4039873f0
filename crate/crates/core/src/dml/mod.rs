//! Cross-fitted multiply robust estimation with kernel minimax bridges.
//!
//! The sample is split into `L` folds. For each fold the five bridge
//! functions are learned on the other folds and the efficient influence
//! function is averaged over the held-out fold; the estimate is the plain
//! average of the fold estimates.

pub mod kernel;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kernel::{
    gaussian_kernel, median_bandwidth, minimax_objective, select_lambda_h, solve_problem, Hyper, KernelBridge,
    KernelRole, MomentProblem, Q_FLOOR,
};

use crate::bridge::BridgeFunctions;
use crate::data::{empirical_mean_y, Dataset, Obs};
use crate::error::{Error, Result};
use crate::estimators::{eif_core, influence_se, piie_influence, EstimateReport, Method, PsiEstimate};
use crate::rng::{stream_rng, sub_seed};

/// Assignment of `n` rows to `folds` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

/// Random balanced partition: fold sizes differ by at most one.
pub fn make_folds(n: usize, folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds < 2 || folds > n {
        return Err(Error::Precondition(format!(
            "cross-fitting needs 2 <= L <= n, got L = {folds}, n = {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(seed, 0xF01D));
    let mut assignment = vec![0; n];
    for (k, &i) in perm.iter().enumerate() {
        assignment[i] = k % folds;
    }
    Ok(FoldPlan {
        folds,
        assignment,
        seed,
    })
}

impl FoldPlan {
    /// A plan from an explicit assignment; every fold must be nonempty.
    pub fn from_assignment(assignment: Vec<usize>, seed: u64) -> Result<Self> {
        let folds = assignment.iter().max().map_or(0, |m| m + 1);
        if folds < 2 {
            return Err(Error::Precondition("a fold plan needs at least two folds".into()));
        }
        let sizes = Self::count(&assignment, folds);
        if sizes.contains(&0) {
            return Err(Error::Precondition(format!("empty fold in assignment, sizes {sizes:?}")));
        }
        Ok(Self {
            folds,
            assignment,
            seed,
        })
    }

    fn count(assignment: &[usize], folds: usize) -> Vec<usize> {
        let mut s = vec![0; folds];
        for &f in assignment {
            s[f] += 1;
        }
        s
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        Self::count(&self.assignment, self.folds)
    }

    /// Rows held out in fold `l`, in increasing order.
    pub fn test_indices(&self, l: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == l).collect()
    }

    /// Rows used to train the bridges of fold `l`, in increasing order.
    pub fn train_indices(&self, l: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != l).collect()
    }
}

/// Kernel bandwidth: a fixed value or the median heuristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Named(String),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Named("median".into())
    }
}

impl Bandwidth {
    fn resolve(&self, points: &[Vec<f64>]) -> Result<f64> {
        match self {
            Bandwidth::Fixed(s) if s.is_finite() && *s > 0.0 => Ok(*s),
            Bandwidth::Fixed(s) => Err(Error::Config(format!("bandwidth must be positive, got {s}"))),
            Bandwidth::Named(s) if s.eq_ignore_ascii_case("median") => Ok(median_bandwidth(points)),
            Bandwidth::Named(s) => Err(Error::Config(format!("unknown bandwidth rule '{s}'"))),
        }
    }
}

/// Per-role overrides; unset fields fall back to the global settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleConfig {
    pub bandwidth: Option<Bandwidth>,
    pub critic_bandwidth: Option<Bandwidth>,
    /// Multipliers of `n^{-1/2}` searched for `lambda_h`.
    pub lambda_grid: Option<Vec<f64>>,
    pub lambda_g: Option<f64>,
}

/// Settings of the cross-fitted estimator (the `[dml]` config section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmlConfig {
    pub folds: usize,
    pub seed: Option<u64>,
    /// Anchor rows per kernel expansion.
    pub max_anchors: usize,
    pub bandwidth: Bandwidth,
    pub critic_bandwidth: Bandwidth,
    /// Multipliers of `n^{-1/2}` searched for `lambda_h`.
    pub lambda_grid: Vec<f64>,
    /// Critic ridge, fixed.
    pub lambda_g: f64,
    /// Cap on the residual second moments before a warning is raised.
    pub second_moment_cap: f64,
    pub roles: BTreeMap<KernelRole, RoleConfig>,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: None,
            max_anchors: 200,
            bandwidth: Bandwidth::default(),
            critic_bandwidth: Bandwidth::default(),
            lambda_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            lambda_g: 1e-3,
            second_moment_cap: 1e4,
            roles: BTreeMap::new(),
        }
    }
}

impl DmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Precondition(format!("cross-fitting requires L >= 2, got {}", self.folds)));
        }
        if self.max_anchors == 0 {
            return Err(Error::Config("max_anchors must be positive".into()));
        }
        let grids = std::iter::once(&self.lambda_grid).chain(self.roles.values().filter_map(|r| r.lambda_grid.as_ref()));
        for g in grids {
            if g.is_empty() || g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config(format!("lambda grid must be nonempty and positive: {g:?}")));
            }
        }
        let lgs = std::iter::once(self.lambda_g).chain(self.roles.values().filter_map(|r| r.lambda_g));
        for v in lgs {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("lambda_g must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn role(&self, role: KernelRole) -> RoleConfig {
        self.roles.get(&role).cloned().unwrap_or_default()
    }

    /// Resolves bandwidths and the `lambda_h` grid for a problem.
    fn base_hyper(&self, p: &MomentProblem) -> Result<(Hyper, Vec<f64>)> {
        let rc = self.role(p.role);
        let sigma = rc.bandwidth.as_ref().unwrap_or(&self.bandwidth).resolve(&p.s)?;
        let sigma_critic = rc.critic_bandwidth.as_ref().unwrap_or(&self.critic_bandwidth).resolve(&p.v)?;
        let scale = (p.len() as f64).sqrt().recip();
        let grid = rc.lambda_grid.as_ref().unwrap_or(&self.lambda_grid).iter().map(|g| g * scale).collect();
        let hy = Hyper {
            sigma,
            sigma_critic,
            lambda_h: 1.0,
            lambda_g: rc.lambda_g.unwrap_or(self.lambda_g),
        };
        Ok((hy, grid))
    }
}

/// Bridges already fitted on the same training rows, for the nested roles.
#[derive(Clone, Copy, Default)]
pub struct Nested<'a> {
    pub h1: Option<&'a KernelBridge>,
    pub q0: Option<&'a KernelBridge>,
}

fn eval_h1(b: &KernelBridge, o: &Obs<'_>, a: f64) -> f64 {
    let mut s = Vec::with_capacity(8);
    KernelRole::H1.bridge_input(o, a, &mut s);
    b.eval_input(&s)
}

fn eval_at_obs(b: &KernelBridge, o: &Obs<'_>) -> f64 {
    let mut s = Vec::with_capacity(8);
    b.role.bridge_input(o, o.a, &mut s);
    b.eval_input(&s)
}

/// Learns the bridge for `role` on `train` with fully specified
/// hyperparameters. The `h0` roles need `nested.h1`, `q1` needs `nested.q0`.
pub fn minimax_fit(
    train: &Dataset,
    role: KernelRole,
    hyper: Hyper,
    nested: Nested<'_>,
    max_anchors: usize,
    seed: u64,
) -> Result<KernelBridge> {
    let p = build_problem(train, role, nested)?;
    solve_problem(&p, hyper, max_anchors, seed)
}

fn build_problem(train: &Dataset, role: KernelRole, nested: Nested<'_>) -> Result<MomentProblem> {
    let h1 = nested.h1.map(|b| move |o: &Obs<'_>, a: f64| eval_h1(b, o, a));
    let q0 = nested.q0.map(|b| move |o: &Obs<'_>| eval_at_obs(b, o).max(Q_FLOOR));
    MomentProblem::build(
        role,
        train,
        h1.as_ref().map(|f| f as &dyn Fn(&Obs<'_>, f64) -> f64),
        q0.as_ref().map(|f| f as &dyn Fn(&Obs<'_>) -> f64),
    )
}

/// The five kernel bridges of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBridges {
    pub h1: KernelBridge,
    pub h0_a1: KernelBridge,
    pub h0_a0: KernelBridge,
    pub q0: KernelBridge,
    pub q1: KernelBridge,
}

impl KernelBridges {
    pub fn get(&self, role: KernelRole) -> &KernelBridge {
        match role {
            KernelRole::H1 => &self.h1,
            KernelRole::H0A1 => &self.h0_a1,
            KernelRole::H0A0 => &self.h0_a0,
            KernelRole::Q0 => &self.q0,
            KernelRole::Q1 => &self.q1,
        }
    }

    pub fn checksum(&self) -> u64 {
        KernelRole::ALL
            .iter()
            .fold(0u64, |acc, r| acc.rotate_left(13) ^ self.get(*r).checksum())
    }

    fn q0_raw(&self, o: &Obs<'_>) -> f64 {
        eval_at_obs(&self.q0, o)
    }

    fn q1_raw(&self, o: &Obs<'_>) -> f64 {
        eval_at_obs(&self.q1, o)
    }
}

impl BridgeFunctions for KernelBridges {
    fn h1(&self, o: &Obs<'_>, a: f64) -> f64 {
        eval_h1(&self.h1, o, a)
    }
    fn h0(&self, o: &Obs<'_>, a: f64) -> f64 {
        let mut s = Vec::with_capacity(8);
        KernelRole::H0A1.bridge_input(o, a, &mut s);
        a * self.h0_a1.eval_input(&s) + (1.0 - a) * self.h0_a0.eval_input(&s)
    }
    fn q0(&self, o: &Obs<'_>) -> f64 {
        self.q0_raw(o).max(Q_FLOOR)
    }
    fn q1(&self, o: &Obs<'_>) -> f64 {
        self.q1_raw(o).max(Q_FLOOR)
    }
}

/// Fits the five bridges on `train`, selecting `lambda_h` per role.
/// Errors name `fold` and the failing role.
pub fn fit_kernel_bridges(train: &Dataset, cfg: &DmlConfig, fold: usize, seed: u64) -> Result<KernelBridges> {
    let fit = |role: KernelRole, nested: Nested<'_>| -> Result<KernelBridge> {
        let role_seed = sub_seed(seed, role as u64 + 1);
        let wrap = |e: Error| Error::Fold {
            fold,
            role: role.tag().into(),
            source: Box::new(e),
        };
        let p = build_problem(train, role, nested).map_err(wrap)?;
        let (base, grid) = cfg.base_hyper(&p).map_err(wrap)?;
        let (lambda_h, _) = select_lambda_h(&p, &grid, base, cfg.max_anchors, role_seed).map_err(wrap)?;
        solve_problem(&p, Hyper { lambda_h, ..base }, cfg.max_anchors, role_seed).map_err(wrap)
    };
    let h1 = fit(KernelRole::H1, Nested::default())?;
    let with_h1 = Nested {
        h1: Some(&h1),
        q0: None,
    };
    let h0_a1 = fit(KernelRole::H0A1, with_h1)?;
    let h0_a0 = fit(KernelRole::H0A0, with_h1)?;
    let q0 = fit(KernelRole::Q0, Nested::default())?;
    let q1 = fit(
        KernelRole::Q1,
        Nested {
            h1: None,
            q0: Some(&q0),
        },
    )?;
    Ok(KernelBridges {
        h1,
        h0_a1,
        h0_a0,
        q0,
        q1,
    })
}

/// Per-fold seed: depends on the base seed and fold label only.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    sub_seed(seed ^ 0xD31, fold as u64)
}

/// Outcome of a cross-fitted estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmlResult<B> {
    /// `psi` with `per_obs_if` the plug-in influence contributions.
    pub estimate: PsiEstimate,
    pub fold_psi: Vec<f64>,
    pub mean_y: f64,
    pub piie: f64,
    /// Standard error of `psi`.
    pub se_psi: f64,
    /// Standard error of the PIIE.
    pub se: f64,
    pub plan: FoldPlan,
    pub bridges: Vec<B>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl<B> DmlResult<B> {
    /// Report with a 95% Wald interval for the PIIE; diagnostics gain
    /// `se_psi` and the per-fold estimates.
    pub fn report(&self) -> EstimateReport {
        let mut diagnostics = self.diagnostics.clone();
        diagnostics.insert("se_psi".into(), self.se_psi);
        for (l, v) in self.fold_psi.iter().enumerate() {
            diagnostics.insert(format!("fold{l}_psi"), *v);
        }
        let half = 1.959963984540054 * self.se;
        EstimateReport {
            method: Method::DmlMr,
            psi_hat: self.estimate.psi,
            piie_hat: self.piie,
            se: self.se,
            ci_lo: self.piie - half,
            ci_hi: self.piie + half,
            n_boot: 0,
            diagnostics,
        }
    }
}

/// Cross-fitting with an arbitrary bridge learner `fit(train, fold)`.
///
/// Fold estimates are `mean(eif_core)` over the held-out rows; the
/// estimate is their plain average.
pub fn crossfit<B, F>(d: &Dataset, plan: &FoldPlan, fit: F) -> Result<DmlResult<B>>
where
    B: BridgeFunctions + Send,
    F: Fn(&Dataset, usize) -> Result<B> + Sync,
{
    if plan.n() != d.n() {
        return Err(Error::Dimension(format!("fold plan covers {} rows, data has {}", plan.n(), d.n())));
    }
    let per_fold: Vec<(B, Vec<usize>, Vec<f64>)> = (0..plan.folds)
        .into_par_iter()
        .map(|l| {
            let train = d.select(&plan.train_indices(l));
            let b = fit(&train, l).map_err(|e| match e {
                Error::Fold { role, source, .. } => Error::Fold { fold: l, role, source },
                other => Error::Fold {
                    fold: l,
                    role: "bridges".into(),
                    source: Box::new(other),
                },
            })?;
            let test = plan.test_indices(l);
            let core = test.iter().map(|&i| eif_core(&d.obs(i), &b)).collect();
            Ok((b, test, core))
        })
        .collect::<Result<_>>()?;

    let fold_psi: Vec<f64> = per_fold
        .iter()
        .map(|(_, _, c)| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let psi = fold_psi.iter().sum::<f64>() / fold_psi.len() as f64;
    let mut per_obs_if = vec![0.0; d.n()];
    for (_, idx, core) in &per_fold {
        for (&i, c) in idx.iter().zip(core) {
            per_obs_if[i] = c - psi;
        }
    }
    let mean_y = empirical_mean_y(d);
    let se = influence_se(&piie_influence(d, &per_obs_if));
    let se_psi = influence_se(&per_obs_if);
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("folds".into(), plan.folds as f64);
    diagnostics.insert("n".into(), d.n() as f64);
    Ok(DmlResult {
        estimate: PsiEstimate {
            method: Method::DmlMr,
            psi,
            per_obs_if,
        },
        fold_psi,
        mean_y,
        piie: mean_y - psi,
        se_psi,
        se,
        plan: plan.clone(),
        bridges: per_fold.into_iter().map(|(b, _, _)| b).collect(),
        diagnostics,
    })
}

/// Empirical second moments of the four bridge residuals on `d`:
/// `Y - h1`, `(1-A)(h1(.,a) - h0(.,a))` summed over arms,
/// `A - (1-A) q0` and `A q1 - (1-A) q0`.
pub fn residual_second_moments<B: BridgeFunctions + ?Sized>(d: &Dataset, b: &B) -> [f64; 4] {
    let mut s = [0.0; 4];
    for i in 0..d.n() {
        let o = d.obs(i);
        let q0 = b.q0(&o);
        s[0] += (o.y - b.h1(&o, o.a)).powi(2);
        if o.a == 0.0 {
            s[1] += (b.h1(&o, 1.0) - b.h0(&o, 1.0)).powi(2) + (b.h1(&o, 0.0) - b.h0(&o, 0.0)).powi(2);
        }
        s[2] += (o.a - (1.0 - o.a) * q0).powi(2);
        s[3] += (o.a * b.q1(&o) - (1.0 - o.a) * q0).powi(2);
    }
    s.map(|v| v / d.n() as f64)
}

/// Cross-fitted multiply robust estimator with kernel minimax bridges.
pub fn psi_dml(d: &Dataset, cfg: &DmlConfig, seed: u64) -> Result<DmlResult<KernelBridges>> {
    cfg.validate()?;
    if d.n() < 10 * cfg.folds {
        return Err(Error::Precondition(format!(
            "cross-fitting with L = {} needs n >= {}, got {}",
            cfg.folds,
            10 * cfg.folds,
            d.n()
        )));
    }
    let plan = make_folds(d.n(), cfg.folds, seed)?;
    psi_dml_with_plan(d, cfg, &plan)
}

/// As [`psi_dml`] on an explicit partition. Bridge fits of fold `l` depend
/// only on the rows outside `l` and on `(plan.seed, l)`.
pub fn psi_dml_with_plan(d: &Dataset, cfg: &DmlConfig, plan: &FoldPlan) -> Result<DmlResult<KernelBridges>> {
    cfg.validate()?;
    let seed = plan.seed;
    let mut out = crossfit(d, plan, |train, l| fit_kernel_bridges(train, cfg, l, fold_seed(seed, l)))?;

    let mut clipped = 0usize;
    let mut moments = [0.0f64; 4];
    for (l, b) in out.bridges.iter().enumerate() {
        let test = d.select(&plan.test_indices(l));
        for i in 0..test.n() {
            let o = test.obs(i);
            clipped += usize::from(b.q0_raw(&o) < Q_FLOOR) + usize::from(o.a == 1.0 && b.q1_raw(&o) < Q_FLOOR);
        }
        let m = residual_second_moments(&test, b);
        for k in 0..4 {
            moments[k] += m[k] * test.n() as f64 / d.n() as f64;
        }
    }
    let dg = &mut out.diagnostics;
    dg.insert("q_clipped".into(), clipped as f64);
    let mut over = false;
    for (name, v) in ["h1", "h0", "q0", "q1"].iter().zip(moments) {
        dg.insert(format!("{name}_residual_m2"), v);
        if !(v <= cfg.second_moment_cap) {
            over = true;
            log::warn!("{name} residual second moment {v:.3e} exceeds cap {:.1e}", cfg.second_moment_cap);
        }
    }
    dg.insert("second_moment_warning".into(), f64::from(u8::from(over)));
    for (l, b) in out.bridges.iter().enumerate() {
        for r in KernelRole::ALL {
            let kb = b.get(r);
            dg.insert(format!("fold{l}_{r}_lambda_h"), kb.hyper.lambda_h);
            dg.insert(format!("fold{l}_{r}_objective"), kb.objective);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
