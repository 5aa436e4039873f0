//! Gaussian-kernel minimax bridge learners.
//!
//! For a bridge `f` with residual `r = b - a * f(S)` and conditional moment
//! `E[r | V] = 0`, the learner solves
//!
//! `min_f max_g E_n[r g(V) - g(V)^2] - lam_g |g|^2 + lam_h |f|^2`
//!
//! over Gaussian RKHS balls for `f` (on `S`) and the critic `g` (on `V`).
//! Both are restricted to the span of kernel sections at a set of anchor
//! rows, which makes the inner maximum closed form and the outer problem a
//! linear system in the dual weights of `f`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Obs};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Lower clip applied to fitted exposure bridges.
pub const Q_FLOOR: f64 = 1e-6;

/// Which conditional moment a kernel bridge solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelRole {
    H1,
    H0A1,
    H0A0,
    Q0,
    Q1,
}

impl KernelRole {
    pub const ALL: [KernelRole; 5] = [KernelRole::H1, KernelRole::H0A1, KernelRole::H0A0, KernelRole::Q0, KernelRole::Q1];

    pub fn tag(self) -> &'static str {
        match self {
            KernelRole::H1 => "h1",
            KernelRole::H0A1 => "h0_a1",
            KernelRole::H0A0 => "h0_a0",
            KernelRole::Q0 => "q0",
            KernelRole::Q1 => "q1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.tag() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown kernel role '{s}'")))
    }

    /// Bridge input `S`; `a` is the exposure level fed to `h1`.
    pub(crate) fn bridge_input(self, o: &Obs<'_>, a: f64, out: &mut Vec<f64>) {
        out.clear();
        match self {
            KernelRole::H1 => {
                out.extend_from_slice(o.w);
                out.push(o.m);
                out.push(a);
                out.extend_from_slice(o.x);
            }
            KernelRole::H0A1 | KernelRole::H0A0 => {
                out.extend_from_slice(o.w);
                out.extend_from_slice(o.x);
            }
            KernelRole::Q0 => {
                out.extend_from_slice(o.z);
                out.extend_from_slice(o.x);
            }
            KernelRole::Q1 => {
                out.extend_from_slice(o.z);
                out.push(o.m);
                out.extend_from_slice(o.x);
            }
        }
    }

    /// Critic input `V`.
    pub(crate) fn critic_input(self, o: &Obs<'_>, out: &mut Vec<f64>) {
        out.clear();
        match self {
            KernelRole::H1 => {
                out.extend_from_slice(o.z);
                out.push(o.a);
                out.push(o.m);
                out.extend_from_slice(o.x);
            }
            KernelRole::H0A1 | KernelRole::H0A0 => {
                out.extend_from_slice(o.z);
                out.extend_from_slice(o.x);
            }
            KernelRole::Q0 => {
                out.extend_from_slice(o.w);
                out.extend_from_slice(o.x);
            }
            KernelRole::Q1 => {
                out.extend_from_slice(o.w);
                out.push(o.m);
                out.extend_from_slice(o.x);
            }
        }
    }

    pub fn is_exposure_bridge(self) -> bool {
        matches!(self, KernelRole::Q0 | KernelRole::Q1)
    }
}

impl fmt::Display for KernelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Fully specified hyperparameters of one minimax fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Bandwidth of the bridge kernel on `S`.
    pub sigma: f64,
    /// Bandwidth of the critic kernel on `V`.
    pub sigma_critic: f64,
    pub lambda_h: f64,
    pub lambda_g: f64,
}

impl Hyper {
    fn validate(&self) -> Result<()> {
        let ok = [self.sigma, self.sigma_critic, self.lambda_h, self.lambda_g]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("kernel hyperparameters must be positive and finite: {self:?}")))
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp()
}

/// Median pairwise Euclidean distance over (at most) the first 400 rows.
pub fn median_bandwidth(points: &[Vec<f64>]) -> f64 {
    let m = points.len().min(400);
    let mut d = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
    for i in 0..m {
        for j in 0..i {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *med > 0.0 {
        *med
    } else {
        1.0
    }
}

/// One regression-type conditional moment problem on a training set:
/// rows `i` with target `b_i`, multiplier `a_i`, bridge input `S_i` and
/// critic input `V_i`.
#[derive(Debug, Clone)]
pub struct MomentProblem {
    pub role: KernelRole,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub s: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl MomentProblem {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub(crate) fn subset(&self, idx: &[usize]) -> Self {
        Self {
            role: self.role,
            b: idx.iter().map(|&i| self.b[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            s: idx.iter().map(|&i| self.s[i].clone()).collect(),
            v: idx.iter().map(|&i| self.v[i].clone()).collect(),
        }
    }

    /// Builds the problem for `role` on `train`. `h1` supplies the fitted
    /// outcome bridge for the `h0` roles and `q0` the fitted exposure bridge
    /// for `q1`.
    pub fn build(
        role: KernelRole,
        train: &Dataset,
        h1: Option<&dyn Fn(&Obs<'_>, f64) -> f64>,
        q0: Option<&dyn Fn(&Obs<'_>) -> f64>,
    ) -> Result<Self> {
        let mut p = Self {
            role,
            b: vec![],
            a: vec![],
            s: vec![],
            v: vec![],
        };
        let mut buf = Vec::new();
        for i in 0..train.n() {
            let o = train.obs(i);
            let (b, a) = match role {
                KernelRole::H1 => (o.y, 1.0),
                KernelRole::H0A1 | KernelRole::H0A0 => {
                    if o.a != 0.0 {
                        continue;
                    }
                    let arm = if role == KernelRole::H0A1 { 1.0 } else { 0.0 };
                    let h = h1.ok_or_else(|| Error::Precondition(format!("{role} needs a fitted h1")))?;
                    (h(&o, arm), 1.0)
                }
                KernelRole::Q0 => (o.a, 1.0 - o.a),
                KernelRole::Q1 => {
                    let q = q0.ok_or_else(|| Error::Precondition("q1 needs a fitted q0".into()))?;
                    ((1.0 - o.a) * q(&o), o.a)
                }
            };
            p.b.push(b);
            p.a.push(a);
            role.bridge_input(&o, o.a, &mut buf);
            p.s.push(buf.clone());
            role.critic_input(&o, &mut buf);
            p.v.push(buf.clone());
        }
        if p.is_empty() {
            return Err(Error::Precondition(format!("no training rows for {role}")));
        }
        Ok(p)
    }
}

/// A fitted kernel bridge `f(s) = sum_j beta_j k(s, anchor_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBridge {
    pub role: KernelRole,
    pub anchors: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub hyper: Hyper,
    /// Minimax objective at the solution, penalty included.
    pub objective: f64,
    /// Squared RKHS norm `beta' K beta`.
    pub norm_sq: f64,
}

impl KernelBridge {
    /// Raw kernel expansion at bridge input `s`.
    pub fn eval_input(&self, s: &[f64]) -> f64 {
        self.anchors
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * gaussian_kernel(s, c, self.hyper.sigma))
            .sum()
    }

    /// Order-sensitive checksum of the dual weights and anchors.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.weights.iter().for_each(|&v| eat(v));
        self.anchors.iter().flatten().for_each(|&v| eat(v));
        h
    }
}

/// Critic-side quantities for a problem at a given anchor set.
struct Critic {
    /// Cholesky of `G = K_nr' K_nr / n + lam_g K_rr`.
    g_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    k_nr: DMatrix<f64>,
}

fn gram(rows: &[Vec<f64>], cols: &[Vec<f64>], sigma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| gaussian_kernel(&rows[i], &cols[j], sigma))
}

/// Cholesky with escalating diagonal jitter.
fn robust_cholesky(m: DMatrix<f64>, context: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut t = m.clone();
        for i in 0..t.nrows() {
            t[(i, i)] += jitter;
        }
        if let Some(c) = t.cholesky() {
            return Ok(c);
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
    }
    Err(Error::Conditioning(context.to_string()))
}

fn critic(p: &MomentProblem, anchors_v: &[Vec<f64>], hy: &Hyper) -> Result<Critic> {
    let n = p.len() as f64;
    let k_nr = gram(&p.v, anchors_v, hy.sigma_critic);
    let k_rr = gram(anchors_v, anchors_v, hy.sigma_critic);
    let g = k_nr.tr_mul(&k_nr) / n + k_rr * hy.lambda_g;
    Ok(Critic {
        g_chol: robust_cholesky(g, "minimax critic Gram")?,
        k_nr,
    })
}

/// Anchor rows: all rows when `n <= max_anchors`, else a seeded subset.
pub(crate) fn choose_anchors(n: usize, max_anchors: usize, seed: u64) -> Vec<usize> {
    if n <= max_anchors {
        return (0..n).collect();
    }
    let mut rng = stream_rng(seed, 0xA1);
    let mut idx = sample(&mut rng, n, max_anchors).into_vec();
    idx.sort_unstable();
    idx
}

/// Projected moment `1/4 u' G^{-1} u` of residuals `r` on problem `p`:
/// the closed-form inner maximum.
fn projected_moment(cr: &Critic, r: &DVector<f64>, n: f64) -> f64 {
    let u = cr.k_nr.tr_mul(r) / n;
    0.25 * u.dot(&cr.g_chol.solve(&u))
}

/// Solves the minimax problem for fixed hyperparameters.
pub fn solve_problem(p: &MomentProblem, hy: Hyper, max_anchors: usize, seed: u64) -> Result<KernelBridge> {
    hy.validate()?;
    let idx = choose_anchors(p.len(), max_anchors, seed);
    fit_with_anchors(p, &idx, hy)
}

fn fit_with_anchors(p: &MomentProblem, idx: &[usize], hy: Hyper) -> Result<KernelBridge> {
    let n = p.len() as f64;
    let anchors_s: Vec<Vec<f64>> = idx.iter().map(|&i| p.s[i].clone()).collect();
    let anchors_v: Vec<Vec<f64>> = idx.iter().map(|&i| p.v[i].clone()).collect();
    let cr = critic(p, &anchors_v, &hy)?;
    let l_nr = gram(&p.s, &anchors_s, hy.sigma);
    let l_rr = gram(&anchors_s, &anchors_s, hy.sigma);

    // P = K_nr' diag(a) L_nr / n, c = K_nr' b / n
    let mut al = l_nr.clone();
    for (i, mut row) in al.row_iter_mut().enumerate() {
        row *= p.a[i];
    }
    let pm = cr.k_nr.tr_mul(&al) / n;
    let b = DVector::from_column_slice(&p.b);
    let c = cr.k_nr.tr_mul(&b) / n;

    let ginv_p = cr.g_chol.solve(&pm);
    let lhs = pm.tr_mul(&ginv_p) + &l_rr * (4.0 * hy.lambda_h);
    let lhs = (&lhs + lhs.transpose()) * 0.5;
    let rhs = ginv_p.tr_mul(&c);
    let beta = robust_cholesky(lhs, &format!("minimax {} system", p.role))?.solve(&rhs);
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning(format!("minimax {} weights", p.role)));
    }

    let fitted = &al * &beta;
    let r = b - fitted;
    let norm_sq = beta.dot(&(&l_rr * &beta));
    Ok(KernelBridge {
        role: p.role,
        anchors: anchors_s,
        weights: beta.as_slice().to_vec(),
        hyper: hy,
        objective: projected_moment(&cr, &r, n) + hy.lambda_h * norm_sq,
        norm_sq,
    })
}

/// Inner maximum of the minimax criterion at an arbitrary bridge `f`
/// (no bridge penalty), with the critic on the given anchor count.
pub fn minimax_objective(
    p: &MomentProblem,
    f: &dyn Fn(&[f64]) -> f64,
    sigma_critic: f64,
    lambda_g: f64,
    max_anchors: usize,
    seed: u64,
) -> Result<f64> {
    let hy = Hyper {
        sigma: 1.0,
        sigma_critic,
        lambda_h: 1.0,
        lambda_g,
    };
    hy.validate()?;
    let idx = choose_anchors(p.len(), max_anchors, seed);
    let anchors_v: Vec<Vec<f64>> = idx.iter().map(|&i| p.v[i].clone()).collect();
    let cr = critic(p, &anchors_v, &hy)?;
    let r = DVector::from_iterator(p.len(), (0..p.len()).map(|i| p.b[i] - p.a[i] * f(&p.s[i])));
    Ok(projected_moment(&cr, &r, p.len() as f64))
}

/// Picks `lambda_h` from `grid` by the held-out projected moment: fit on a
/// seeded half of the rows, score the residual on the other half.
pub fn select_lambda_h(
    p: &MomentProblem,
    grid: &[f64],
    base: Hyper,
    max_anchors: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if grid.len() == 1 {
        return Ok((grid[0], vec![f64::NAN]));
    }
    let n = p.len();
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream_rng(seed, 0x5E1));
    }
    let (fit_idx, val_idx) = order.split_at(n / 2);
    if fit_idx.is_empty() || val_idx.is_empty() {
        return Ok((grid[0], vec![f64::NAN; grid.len()]));
    }
    let (fit_p, val_p) = (p.subset(fit_idx), p.subset(val_idx));
    let anchors = choose_anchors(fit_p.len(), max_anchors, seed);
    let v_idx = choose_anchors(val_p.len(), max_anchors, seed ^ 0x77);
    let anchors_v: Vec<Vec<f64>> = v_idx.iter().map(|&i| val_p.v[i].clone()).collect();
    let cr = critic(&val_p, &anchors_v, &base)?;
    let mut scores = Vec::with_capacity(grid.len());
    for &lh in grid {
        let hy = Hyper { lambda_h: lh, ..base };
        hy.validate()?;
        let kb = fit_with_anchors(&fit_p, &anchors, hy)?;
        let r = DVector::from_iterator(
            val_p.len(),
            (0..val_p.len()).map(|i| val_p.b[i] - val_p.a[i] * kb.eval_input(&val_p.s[i])),
        );
        scores.push(projected_moment(&cr, &r, val_p.len() as f64));
    }
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok((grid[best], scores))
}
