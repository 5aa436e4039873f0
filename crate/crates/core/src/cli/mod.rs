//! Batch command line front end: `estimate`, `simulate` and `benchmark`.
//!
//! Flags take precedence over the TOML config file, which only fills in
//! what the flags leave unset. Every output file carries the config hash
//! and the seed; wall-clock data lives only in the provenance file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_csv, ColumnRoles};
use crate::dml::{psi_dml, DmlConfig};
use crate::error::{Error, Result};
use crate::estimators::{EstimateReport, Method, Pipeline};
use crate::sim::{generate, run_scenario, write_table_csv, McConfig, McSummary, ScenarioSpec, DgpCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Estimate,
    Simulate,
    Benchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// R = 100, B = 200; acceptance tolerances doubled.
    Fast,
    /// R = 500, B = 500.
    Paper,
}

impl Preset {
    pub fn replications(self) -> usize {
        match self {
            Preset::Fast => 100,
            Preset::Paper => 500,
        }
    }

    pub fn n_boot(self) -> usize {
        match self {
            Preset::Fast => 200,
            Preset::Paper => 500,
        }
    }

    pub fn tolerance_multiplier(self) -> f64 {
        match self {
            Preset::Fast => 2.0,
            Preset::Paper => 1.0,
        }
    }
}

/// Command line flags. Unset flags fall back to the config file, then to
/// built-in defaults.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "proxmed", version, about = "Proximal mediation analysis of the population intervention indirect effect")]
pub struct Args {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Input CSV with a header row (estimate mode).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Roles file with `column=role` lines, or an inline list
    /// `col=role,col=role,...`.
    #[arg(long)]
    pub roles: Option<String>,
    /// Standardize the covariate columns of the input data.
    #[arg(long)]
    pub standardize: bool,
    /// Comma-separated estimator tags, e.g. `P-MR,P-OR,DML-MR`.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    /// Bootstrap replicates.
    #[arg(long = "boot")]
    pub boot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated scenario ids (1-4).
    #[arg(long, value_delimiter = ',')]
    pub scenario: Option<Vec<u8>>,
    #[arg(long, value_enum, conflicts_with_all = ["fast", "paper"])]
    pub preset: Option<Preset>,
    /// Shorthand for `--preset fast`.
    #[arg(long, conflicts_with = "paper")]
    pub fast: bool,
    /// Shorthand for `--preset paper`.
    #[arg(long)]
    pub paper: bool,
    /// Replications per scenario; overrides the preset.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Sample size per replication (simulate, benchmark).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// TOML config file; may carry a `[dml]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Contents of the TOML config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<Mode>,
    pub input: Option<PathBuf>,
    pub roles: Option<String>,
    pub standardize: Option<bool>,
    pub estimators: Option<Vec<String>>,
    pub boot: Option<usize>,
    pub seed: Option<u64>,
    pub scenario: Option<Vec<u8>>,
    pub preset: Option<Preset>,
    pub replications: Option<usize>,
    pub n: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub dml: Option<DmlConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub input: Option<PathBuf>,
    pub roles: Option<String>,
    pub standardize: bool,
    pub estimators: Vec<Method>,
    pub boot: usize,
    pub seed: u64,
    /// `false` when the seed was generated because none was given.
    pub seed_given: bool,
    pub scenarios: Vec<u8>,
    pub preset: Option<Preset>,
    pub replications: usize,
    pub n: usize,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub dml: DmlConfig,
}

fn fresh_seed() -> u64 {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64);
    crate::rng::sub_seed(t, std::process::id() as u64)
}

impl RunConfig {
    pub fn resolve(args: &Args) -> Result<Self> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mode = args
            .mode
            .or(file.mode)
            .ok_or_else(|| Error::Config("--mode is required (estimate, simulate or benchmark)".into()))?;
        let flag_preset = match (args.fast, args.paper) {
            (true, _) => Some(Preset::Fast),
            (_, true) => Some(Preset::Paper),
            _ => args.preset,
        };
        let preset = flag_preset.or(file.preset);
        let tags = args.estimators.clone().or(file.estimators.clone());
        let estimators = match tags {
            Some(t) => t.iter().map(|s| s.parse()).collect::<Result<Vec<Method>>>()?,
            None => Method::TABLE.to_vec(),
        };
        if estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        let given_seed = args.seed.or(file.seed);
        let mut dml = file.dml.clone().unwrap_or_default();
        let seed = given_seed.or(dml.seed).unwrap_or_else(fresh_seed);
        dml.seed = Some(dml.seed.unwrap_or(seed));
        let default_boot = preset.map_or(200, Preset::n_boot);
        let cfg = Self {
            mode,
            input: args.input.clone().or(file.input),
            roles: args.roles.clone().or(file.roles),
            standardize: args.standardize || file.standardize.unwrap_or(false),
            estimators,
            boot: args.boot.or(file.boot).unwrap_or(default_boot),
            seed,
            seed_given: given_seed.is_some(),
            scenarios: args.scenario.clone().or(file.scenario).unwrap_or_else(|| vec![1, 2, 3, 4]),
            preset,
            replications: args
                .replications
                .or(file.replications)
                .unwrap_or_else(|| preset.unwrap_or(Preset::Fast).replications()),
            n: args.n.or(file.n).unwrap_or(1000),
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("proxmed-out")),
            threads: args.threads.or(file.threads),
            dml,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::Estimate => {
                if self.input.is_none() {
                    return Err(Error::Config("estimate mode needs --input".into()));
                }
                if self.roles.is_none() {
                    return Err(Error::Config("estimate mode needs --roles".into()));
                }
            }
            Mode::Simulate => {
                if self.scenarios.is_empty() {
                    return Err(Error::Config("no scenarios requested".into()));
                }
                for &s in &self.scenarios {
                    ScenarioSpec::standard(s)?;
                }
                if self.replications == 0 {
                    return Err(Error::Config("replications must be >= 1".into()));
                }
                if self.estimators.contains(&Method::DmlMr) {
                    return Err(Error::Config("DML-MR is not part of the scenario table".into()));
                }
            }
            Mode::Benchmark => {}
        }
        if self.threads == Some(0) {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        if self.estimators.contains(&Method::DmlMr) {
            self.dml.validate()?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything that affects results
    /// (the output directory and thread count excluded), hex-truncated.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("out");
            o.remove("threads");
        }
        let digest = Sha256::digest(serde_json::to_vec(&v)?);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

/// What a run wrote.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub config_hash: String,
    pub seed: u64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Runs the configured mode.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    if let Some(t) = cfg.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    fs::create_dir_all(&cfg.out)?;
    match cfg.mode {
        Mode::Estimate => cmd_estimate(cfg),
        Mode::Simulate => cmd_simulate(cfg),
        Mode::Benchmark => cmd_benchmark(cfg),
    }
}

/// A roles file path, or inline `col=role` pairs separated by commas.
pub fn parse_roles(spec: &str) -> Result<ColumnRoles> {
    let path = Path::new(spec);
    if path.is_file() {
        ColumnRoles::from_file(path)
    } else if spec.contains('=') {
        ColumnRoles::parse(&spec.replace(',', "\n"))
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("roles file {spec} not found"),
        )))
    }
}

#[derive(Serialize)]
struct EstimateFile<'a> {
    config_hash: &'a str,
    seed: u64,
    input: Option<&'a Path>,
    n: usize,
    reports: &'a [EstimateReport],
}

/// Reports for the parametric estimators (one shared bootstrap) and, if
/// requested, the cross-fitted estimator.
pub fn estimate_reports(d: &crate::data::Dataset, cfg: &RunConfig) -> Result<Vec<EstimateReport>> {
    let parametric: Vec<Method> = cfg.estimators.iter().copied().filter(|m| *m != Method::DmlMr).collect();
    let mut reports = if parametric.is_empty() {
        Vec::new()
    } else {
        Pipeline::new(&parametric)?.estimate(d, cfg.boot, cfg.seed)?
    };
    if cfg.estimators.contains(&Method::DmlMr) {
        reports.push(psi_dml(d, &cfg.dml, cfg.dml.seed.unwrap_or(cfg.seed))?.report());
    }
    // keep the requested order
    let pos = |m: Method| cfg.estimators.iter().position(|x| *x == m).unwrap_or(usize::MAX);
    reports.sort_by_key(|r| pos(r.method));
    Ok(reports)
}

fn cmd_estimate(cfg: &RunConfig) -> Result<Outcome> {
    let input = cfg.input.as_ref().expect("validated");
    let roles = parse_roles(cfg.roles.as_deref().expect("validated"))?;
    let mut d = load_csv(input, &roles)?;
    if cfg.standardize {
        d = d.standardize_x();
    }
    let reports = estimate_reports(&d, cfg)?;
    let hash = cfg.hash()?;

    let json = cfg.out.join("estimate.json");
    write_json(
        &json,
        &EstimateFile {
            config_hash: &hash,
            seed: cfg.seed,
            input: Some(input),
            n: d.n(),
            reports: &reports,
        },
    )?;
    let csv_path = cfg.out.join("estimate.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut header: Vec<&str> = EstimateReport::CSV_HEADER.to_vec();
    header.extend(["n_boot", "seed", "config_hash"]);
    w.write_record(&header)?;
    for r in &reports {
        let mut rec = r.csv_record().to_vec();
        rec.extend([r.n_boot.to_string(), cfg.seed.to_string(), hash.clone()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    let prov = cfg.out.join("provenance.json");
    write_json(&prov, &provenance(cfg, &hash, serde_json::json!({ "dropped_rows": d.dropped_rows() }))?)?;
    Ok(Outcome {
        files: vec![json, csv_path, prov],
        config_hash: hash,
        seed: cfg.seed,
    })
}

fn provenance(cfg: &RunConfig, hash: &str, extra: serde_json::Value) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "config_hash": hash,
        "seed": cfg.seed,
        "seed_generated": !cfg.seed_given,
        "created_unix": unix_now(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "run": extra,
    }))
}

#[derive(Serialize)]
struct ScenarioProvenance<'a> {
    scenario: u8,
    truth: f64,
    replications: usize,
    n: usize,
    n_boot: usize,
    seed: u64,
    failed_replications: usize,
    failure_fraction: f64,
    valid: bool,
    failure_reasons: &'a [String],
    elapsed_secs: f64,
}

/// Runs the requested scenarios and returns their summaries.
pub fn simulate_summaries(cfg: &RunConfig) -> Result<Vec<(McSummary, f64)>> {
    let mc = McConfig {
        replications: cfg.replications,
        n: cfg.n,
        n_boot: cfg.boot,
        seed: cfg.seed,
        methods: cfg.estimators.clone(),
    };
    cfg.scenarios
        .iter()
        .map(|&id| {
            let t = Instant::now();
            let s = run_scenario(&ScenarioSpec::standard(id)?, &mc)?;
            if !s.valid {
                log::warn!(
                    "scenario {id}: {} of {} replications failed; summary flagged invalid",
                    s.failed_replications,
                    s.replications
                );
            }
            Ok((s, t.elapsed().as_secs_f64()))
        })
        .collect()
}

fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome> {
    let hash = cfg.hash()?;
    let results = simulate_summaries(cfg)?;
    let summaries: Vec<McSummary> = results.iter().map(|(s, _)| s.clone()).collect();
    let table = cfg.out.join("scenarios.csv");
    write_table_csv(&summaries, &table, &hash)?;
    let scen: Vec<ScenarioProvenance> = results
        .iter()
        .map(|(s, secs)| ScenarioProvenance {
            scenario: s.scenario,
            truth: s.truth,
            replications: s.replications,
            n: s.n,
            n_boot: s.n_boot,
            seed: s.seed,
            failed_replications: s.failed_replications,
            failure_fraction: s.failure_fraction,
            valid: s.valid,
            failure_reasons: &s.failure_reasons,
            elapsed_secs: *secs,
        })
        .collect();
    let prov = cfg.out.join("provenance.json");
    let preset = cfg.preset.unwrap_or(Preset::Fast);
    write_json(
        &prov,
        &provenance(
            cfg,
            &hash,
            serde_json::json!({
                "preset": cfg.preset,
                "tolerance_multiplier": preset.tolerance_multiplier(),
                "widened_tolerances": preset.tolerance_multiplier() > 1.0,
                "scenarios": scen,
            }),
        )?,
    )?;
    Ok(Outcome {
        files: vec![table, prov],
        config_hash: hash,
        seed: cfg.seed,
    })
}

fn cmd_benchmark(cfg: &RunConfig) -> Result<Outcome> {
    let hash = cfg.hash()?;
    let d = generate(&DgpCoefficients::default(), cfg.n, cfg.seed)?.data;
    let mut timings = BTreeMap::new();
    let mut values = BTreeMap::new();
    let parametric: Vec<Method> = cfg.estimators.iter().copied().filter(|m| *m != Method::DmlMr).collect();
    if !parametric.is_empty() {
        let p = Pipeline::new(&parametric)?;
        let t = Instant::now();
        let out = p.run(&d)?;
        timings.insert("point_estimates".to_string(), t.elapsed().as_secs_f64());
        for (e, v) in out.estimates.iter().zip(out.piie()) {
            values.insert(e.method.tag().to_string(), v);
        }
        if cfg.boot >= 2 {
            let t = Instant::now();
            p.estimate(&d, cfg.boot, cfg.seed)?;
            timings.insert("bootstrap".to_string(), t.elapsed().as_secs_f64());
        }
    }
    if cfg.estimators.contains(&Method::DmlMr) {
        let t = Instant::now();
        let r = psi_dml(&d, &cfg.dml, cfg.dml.seed.unwrap_or(cfg.seed))?;
        timings.insert("dml".to_string(), t.elapsed().as_secs_f64());
        values.insert(Method::DmlMr.tag().to_string(), r.piie);
    }
    let bench = cfg.out.join("benchmark.json");
    write_json(
        &bench,
        &serde_json::json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "n": cfg.n,
            "boot": cfg.boot,
            "piie": values,
        }),
    )?;
    let prov = cfg.out.join("provenance.json");
    write_json(&prov, &provenance(cfg, &hash, serde_json::json!({ "timings_secs": timings }))?)?;
    Ok(Outcome {
        files: vec![bench, prov],
        config_hash: hash,
        seed: cfg.seed,
    })
}

/// Machine-readable error document written to stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    })
    .to_string()
}

/// Parses, resolves and runs; returns the process exit code.
pub fn main_with(args: Args) -> i32 {
    match RunConfig::resolve(&args).and_then(|cfg| run(&cfg)) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            e.exit_code()
        }
    }
}
