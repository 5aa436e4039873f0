//! Simulation lab: the linear-Gaussian design with a latent confounder,
//! its closed-form bridges and counterfactual truth, and Monte Carlo runs
//! of the four misspecification scenarios.

mod dgp;
mod scenario;
mod truth;

pub use dgp::{generate, generate_stream, DgpCoefficients, ExposureEq, GaussianEq, OutcomeEq, Simulated};
pub use scenario::{
    replication_boot_seed, run_scenario, write_table_csv, EstimatorSummary, McConfig, McSummary, ReplicationRecord,
    ScenarioSpec, MAX_REPLICATION_FAILURES,
};
pub use truth::{analytic_mean_y, analytic_piie, expected_exposure, oracle_truth, true_bridges, OracleTruth};
