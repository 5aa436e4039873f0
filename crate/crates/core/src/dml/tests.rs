use super::*;
use crate::bridge::{fit_bridges, FitPlan, InstrumentBasis, ParametricBridges};
use crate::estimators::psi_pmr;
use crate::sim::{generate, true_bridges, DgpCoefficients};

fn sim(n: usize, seed: u64) -> Dataset {
    generate(&DgpCoefficients::default(), n, seed).unwrap().data
}

fn with_y(d: &Dataset, y: Vec<f64>) -> Dataset {
    Dataset::new(y, d.a().to_vec(), d.m().to_vec(), d.x().clone(), d.w().clone(), d.z().clone()).unwrap()
}

#[test]
fn folds_are_balanced_and_deterministic() {
    let p = make_folds(10, 5, 3).unwrap();
    assert_eq!(p.sizes(), vec![2; 5]);
    let mut s = make_folds(11, 5, 3).unwrap().sizes();
    s.sort_unstable();
    assert_eq!(s, vec![2, 2, 2, 2, 3]);
    assert_eq!(make_folds(97, 4, 8).unwrap(), make_folds(97, 4, 8).unwrap());
    assert_ne!(make_folds(97, 4, 8).unwrap().assignment, make_folds(97, 4, 9).unwrap().assignment);
    assert!(matches!(make_folds(10, 1, 0), Err(Error::Precondition(_))));
    assert!(matches!(make_folds(3, 4, 0), Err(Error::Precondition(_))));
    // partition: train and test indices are complementary
    let p = make_folds(23, 3, 1).unwrap();
    for l in 0..3 {
        assert_eq!(p.train_indices(l).len() + p.test_indices(l).len(), 23);
    }
}

#[test]
fn cross_fitting_contract() {
    let d = sim(100, 1);
    let cfg = DmlConfig {
        folds: 1,
        ..DmlConfig::default()
    };
    assert!(matches!(psi_dml(&d, &cfg, 0), Err(Error::Precondition(_))));
    let cfg = DmlConfig {
        folds: 11,
        ..DmlConfig::default()
    };
    assert!(matches!(psi_dml(&d, &cfg, 0), Err(Error::Precondition(_))));
}

#[test]
fn oracle_bridges_reproduce_foldwise_pmr() {
    let c = DgpCoefficients::default();
    let d = sim(503, 2);
    let oracle = ParametricBridges::from_params(true_bridges(&c).unwrap());
    let plan = make_folds(d.n(), 5, 7).unwrap();
    let r = crossfit(&d, &plan, |_, _| Ok(oracle.clone())).unwrap();
    for l in 0..5 {
        let held = d.select(&plan.test_indices(l));
        assert_eq!(r.fold_psi[l], psi_pmr(&held, &oracle).psi);
    }
    assert_eq!(r.estimate.psi, r.fold_psi.iter().sum::<f64>() / 5.0);
    assert_eq!(r.estimate.per_obs_if.len(), d.n());
}

#[test]
fn relabelling_folds_leaves_estimate_unchanged() {
    let d = sim(2000, 3);
    let plan = make_folds(d.n(), 4, 1).unwrap();
    let perm = [2, 0, 3, 1];
    let relabelled = FoldPlan::from_assignment(plan.assignment.iter().map(|&f| perm[f]).collect(), 1).unwrap();
    let fit = |train: &Dataset, _| fit_bridges(train, &FitPlan::all(), &InstrumentBasis::default());
    let a = crossfit(&d, &plan, fit).unwrap();
    let b = crossfit(&d, &relabelled, fit).unwrap();
    assert!((a.estimate.psi - b.estimate.psi).abs() < 1e-12);
}

#[test]
fn fold_bridges_ignore_their_own_fold() {
    let d = sim(240, 4);
    let cfg = DmlConfig {
        folds: 3,
        max_anchors: 60,
        ..DmlConfig::default()
    };
    let plan = make_folds(d.n(), 3, 11).unwrap();
    let full = psi_dml_with_plan(&d, &cfg, &plan).unwrap();

    // drop one row of fold 1
    let gone = plan.test_indices(1)[5];
    let keep: Vec<usize> = (0..d.n()).filter(|&i| i != gone).collect();
    let smaller = d.select(&keep);
    let plan2 = FoldPlan::from_assignment(keep.iter().map(|&i| plan.assignment[i]).collect(), 11).unwrap();
    let cut = psi_dml_with_plan(&smaller, &cfg, &plan2).unwrap();

    assert_eq!(full.bridges[1].checksum(), cut.bridges[1].checksum());
    assert_ne!(full.bridges[0].checksum(), cut.bridges[0].checksum());
    assert_ne!(full.bridges[2].checksum(), cut.bridges[2].checksum());
}

fn noiseless_h1_problem(n: usize, seed: u64) -> (Dataset, MomentProblem) {
    let d = sim(n, seed);
    let y: Vec<f64> = (0..d.n())
        .map(|i| {
            let o = d.obs(i);
            1.0 + 0.5 * o.w[0] + 0.8 * o.m + 0.6 * o.a - 0.4 * o.x[0] + 0.3 * o.x[1]
        })
        .collect();
    let d = with_y(&d, y);
    let p = MomentProblem::build(KernelRole::H1, &d, None, None).unwrap();
    (d, p)
}

#[test]
fn h1_matches_linear_fit_on_noiseless_data() {
    let (d, p) = noiseless_h1_problem(500, 5);
    let lin = fit_bridges(&d, &FitPlan::all(), &InstrumentBasis::default()).unwrap();
    let hy = Hyper {
        sigma: 3.0 * median_bandwidth(&p.s),
        sigma_critic: median_bandwidth(&p.v),
        lambda_h: 1e-8,
        lambda_g: 1e-6,
    };
    let kb = solve_problem(&p, hy, 500, 1).unwrap();
    let mse = (0..d.n())
        .map(|i| {
            let o = d.obs(i);
            (kb.eval_input(&p.s[i]) - lin.h1(&o, o.a)).powi(2)
        })
        .sum::<f64>()
        / d.n() as f64;
    assert!(mse.sqrt() <= 0.05, "rmse {}", mse.sqrt());
}

#[test]
fn heavy_penalty_shrinks_to_zero_and_norm_is_monotone() {
    let (_, p) = noiseless_h1_problem(300, 6);
    let base = Hyper {
        sigma: median_bandwidth(&p.s),
        sigma_critic: median_bandwidth(&p.v),
        lambda_h: 1.0,
        lambda_g: 1e-3,
    };
    let mut last = f64::INFINITY;
    for lh in [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0] {
        let kb = solve_problem(&p, Hyper { lambda_h: lh, ..base }, 100, 2).unwrap();
        assert!(kb.norm_sq <= last * (1.0 + 1e-9), "{lh}: {} > {last}", kb.norm_sq);
        last = kb.norm_sq;
        assert_eq!(kb.weights.len(), kb.anchors.len());
    }
    let kb = solve_problem(&p, Hyper { lambda_h: 1e12, ..base }, 100, 2).unwrap();
    assert!(kb.weights.iter().all(|w| w.abs() < 1e-8));
    assert!(p.s.iter().all(|s| kb.eval_input(s).abs() < 1e-7));
}

#[test]
fn objective_is_smallest_at_true_bridges() {
    let c = DgpCoefficients::default();
    let truth = ParametricBridges::from_params(true_bridges(&c).unwrap());
    let d = sim(10_000, 7);
    let p = MomentProblem::build(KernelRole::H1, &d, None, None).unwrap();
    let sc = median_bandwidth(&p.v);
    let eval = |s: &[f64], bump: f64| {
        // s = (w, m, a, x1, x2)
        let b = &truth.params.beta1;
        b[0] + b[1] * s[0] + b[2] * s[1] + b[3] * s[2] + b[4] * s[3] + b[5] * s[4] + bump
    };
    let at_truth = minimax_objective(&p, &|s| eval(s, 0.0), sc, 1e-3, 200, 3).unwrap();
    // unit perturbations: a constant and a normalized kernel section
    let anchor = p.s[0].clone();
    for pert in [
        Box::new(|_: &[f64]| 1.0) as Box<dyn Fn(&[f64]) -> f64>,
        Box::new(move |s: &[f64]| gaussian_kernel(s, &anchor, 1.0)),
    ] {
        let off = minimax_objective(&p, &|s| eval(s, 0.0) + pert(s), sc, 1e-3, 200, 3).unwrap();
        assert!(at_truth <= off, "{at_truth} > {off}");
    }

    // exposure bridge q0 on its own moment
    let p = MomentProblem::build(KernelRole::Q0, &d, None, None).unwrap();
    let sc = median_bandwidth(&p.v);
    let g = truth.params.gamma0.clone();
    let q0 = move |s: &[f64]| (-(g[0] + g[1] * s[0] + g[2] * s[1] + g[3] * s[2])).exp();
    let at_truth = minimax_objective(&p, &q0, sc, 1e-3, 200, 3).unwrap();
    let off = minimax_objective(&p, &|s| q0(s) + 1.0, sc, 1e-3, 200, 3).unwrap();
    assert!(at_truth <= off, "{at_truth} > {off}");
}

#[test]
fn second_moment_guard_flags_small_cap() {
    let d = sim(300, 8);
    let cfg = DmlConfig {
        folds: 3,
        max_anchors: 50,
        lambda_grid: vec![1e-2],
        second_moment_cap: 1e-9,
        ..DmlConfig::default()
    };
    let r = psi_dml(&d, &cfg, 1).unwrap();
    assert_eq!(r.diagnostics["second_moment_warning"], 1.0);
    assert!(r.diagnostics["h1_residual_m2"] > 0.0);
    let relaxed = psi_dml(&d, &DmlConfig { second_moment_cap: 1e12, ..cfg }, 1).unwrap();
    assert_eq!(relaxed.diagnostics["second_moment_warning"], 0.0);
    assert_eq!(relaxed.estimate.psi, r.estimate.psi);
    assert!(r.se > 0.0 && r.piie.is_finite());
}

#[test]
fn config_parses_from_toml() {
    let text = r#"
        folds = 4
        seed = 9
        lambda_grid = [0.001, 0.01]
        bandwidth = "median"
        [roles.q1]
        bandwidth = 1.5
        lambda_g = 0.01
    "#;
    let cfg: DmlConfig = toml::from_str(text).unwrap();
    assert_eq!(cfg.folds, 4);
    assert_eq!(cfg.roles[&KernelRole::Q1].bandwidth, Some(Bandwidth::Fixed(1.5)));
    cfg.validate().unwrap();
    let bad: DmlConfig = toml::from_str("bandwidth = \"silverman\"").unwrap();
    let d = sim(100, 1);
    assert!(matches!(psi_dml(&d, &bad, 0), Err(Error::Fold { .. })));
    assert!(toml::from_str::<DmlConfig>("lambda = 1").is_err());
}
