//! Config-file driven experiment harness.
//!
//! Every subcommand reads one TOML config file, runs a deterministic
//! experiment from `polystab`, and writes a run directory containing the
//! config snapshot, a `summary.txt` of `key=value` lines, and plot-ready
//! CSV files.  Unknown config keys are hard errors, and outputs are pure
//! functions of `(config, seed)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::Deserialize;
use thiserror::Error;

use polystab::experiments::{
    run_exit_rate, run_exitmoment_compare, run_moments, run_spikes, run_tail, ExitMomentCompare,
    ExitRateExperiment, MomentExperiment, SpikeExperiment, TailExperiment,
};
use polystab::exitmoments::smallest_eigenvalue;
use polystab::lyapunov::{
    build_tables, derive_params, verify_drift, LyapunovError, ParamOverrides, PhiKind, VerifyGrid,
};
use polystab::model::SystemSpec;
use polystab::simulate::{integrate, IntegratorConfig, Mode};
use polystab::stats::{log_levels, Clock};

#[derive(Error, Debug)]
pub enum CliError {
    /// Bad configuration: exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Failure while running: exit code 3.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

// ---------------------------------------------------------------------------
// config file

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<String>,
    pub system: Option<SystemBlock>,
    pub integrator: Option<IntegratorBlock>,
    pub simulate: Option<SimulateBlock>,
    pub lyapunov: Option<LyapunovBlock>,
    pub spikes: Option<SpikesBlock>,
    pub tail: Option<TailBlock>,
    pub moments: Option<MomentsBlock>,
    pub exitrate: Option<ExitRateBlock>,
    pub eigen: Option<EigenBlock>,
    pub exitmoments: Option<ExitMomentsBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub n: u32,
    pub sigma: f64,
    /// `(j, k, re, im)` rows of the lower-order polynomial F.
    #[serde(default)]
    pub coeffs: Vec<(u32, u32, f64, f64)>,
}

impl SystemBlock {
    fn to_spec(&self) -> Result<SystemSpec, CliError> {
        SystemSpec::new(
            self.n,
            self.coeffs.iter().map(|&(j, k, re, im)| ((j, k), Complex64::new(re, im))),
            self.sigma,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct IntegratorBlock {
    pub dt_base: Option<f64>,
    pub drift_cap_eps: Option<f64>,
    pub r_cap: Option<f64>,
    pub t_max: Option<f64>,
    pub mode: Option<String>,
    pub thin_stride: Option<usize>,
    pub r_min: Option<f64>,
    pub angle_noise_cap: Option<f64>,
}

impl IntegratorBlock {
    fn to_config(&self) -> Result<IntegratorConfig, CliError> {
        let mut cfg = IntegratorConfig::default();
        if let Some(v) = self.dt_base {
            cfg.dt_base = v;
        }
        if let Some(v) = self.drift_cap_eps {
            cfg.drift_cap_eps = v;
        }
        if let Some(v) = self.r_cap {
            cfg.r_cap = v;
        }
        if let Some(v) = self.t_max {
            cfg.t_max = v;
        }
        if let Some(v) = self.thin_stride {
            cfg.thin_stride = v;
        }
        if let Some(v) = self.r_min {
            cfg.r_min = v;
        }
        if let Some(v) = self.angle_noise_cap {
            cfg.angle_noise_cap = v;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = match mode.as_str() {
                "cartesian" => Mode::Cartesian,
                "timechanged" => Mode::TimeChangedPolar,
                "deterministic" => Mode::DeterministicCartesian,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown integrator mode `{other}` (cartesian|timechanged|deterministic)"
                    )))
                }
            };
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    /// Initial condition, Cartesian components.
    pub z0: Option<(f64, f64)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovBlock {
    pub gamma: f64,
    pub phi: Option<String>,
    pub n_radii: Option<usize>,
    pub r_max_factor: Option<f64>,
    pub n_theta_per_region: Option<usize>,
    pub theta1: Option<f64>,
    pub eta_star: Option<f64>,
    pub r_star: Option<f64>,
    pub h3: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SpikesBlock {
    pub clock: Option<String>,
    pub r_low: Option<f64>,
    pub levels: Option<Vec<f64>>,
    pub level_lo: Option<f64>,
    pub level_hi: Option<f64>,
    pub n_levels: Option<usize>,
    pub n_traj: Option<usize>,
    pub t_per_traj: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TailBlock {
    pub time_changed: Option<bool>,
    pub n_traj: Option<usize>,
    pub t_per_traj: Option<f64>,
    pub sample_dt: Option<f64>,
    pub r_moderate: Option<f64>,
    pub n_levels: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsBlock {
    pub gammas: Vec<f64>,
    pub t_total: Option<f64>,
    pub first_span: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExitRateBlock {
    pub eta_star: Option<f64>,
    pub r0: Option<f64>,
    pub n_paths: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenBlock {
    pub eta_star: f64,
    pub grid_size: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExitMomentsBlock {
    pub rows: Option<Vec<(u32, f64, f64, f64)>>,
    pub n_points: Option<usize>,
    pub n_paths: Option<usize>,
    pub dt: Option<f64>,
}

pub fn load_config(path: &Path) -> Result<(ConfigFile, String), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ConfigFile =
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((cfg, text))
}

// ---------------------------------------------------------------------------
// run directory

pub struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    pub fn create(dir: &Path, config_text: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let rd = Self { dir: dir.to_path_buf() };
        rd.write("config_snapshot.toml", config_text)?;
        Ok(rd)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

fn require<'a, T>(block: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    block
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("missing config section [{name}]")))
}

fn system_spec(cfg: &ConfigFile) -> Result<SystemSpec, CliError> {
    require(&cfg.system, "system")?.to_spec()
}

fn seed_of(cfg: &ConfigFile, override_seed: Option<u64>) -> u64 {
    override_seed.or(cfg.seed).unwrap_or(0)
}

// ---------------------------------------------------------------------------
// subcommand drivers

pub fn cmd_simulate(
    cfg: &ConfigFile,
    config_text: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let spec = system_spec(cfg)?;
    let icfg = cfg.integrator.clone().unwrap_or_default().to_config()?;
    let block = cfg.simulate.clone().unwrap_or_default();
    let z0 = block.z0.map(|(re, im)| Complex64::new(re, im)).unwrap_or(Complex64::new(0.0, 0.0));
    let seed = seed_of(cfg, seed);
    let traj = integrate(&spec, z0, &icfg, seed).map_err(runtime)?;
    let rd = RunDir::create(out, config_text)?;
    rd.write("trajectory.csv", &traj.to_csv())?;
    let radii = traj.radii();
    let max_r = radii.iter().copied().fold(0.0f64, f64::max);
    let mut s = String::new();
    let _ = writeln!(s, "kind=simulate");
    let _ = writeln!(s, "seed={seed}");
    let _ = writeln!(s, "samples={}", traj.times.len());
    let _ = writeln!(s, "t_end={}", traj.times.last().copied().unwrap_or(0.0));
    let _ = writeln!(s, "max_r={max_r}");
    let _ = writeln!(s, "events={}", traj.events.len());
    rd.write("summary.txt", &s)
}

pub fn cmd_lyapunov(
    cfg: &ConfigFile,
    config_text: &str,
    out: &Path,
    phi_flag: Option<&str>,
) -> Result<(), CliError> {
    let spec = system_spec(cfg)?;
    let block = require(&cfg.lyapunov, "lyapunov")?;
    let n_f = spec.n() as f64;
    if !(block.gamma > n_f && block.gamma < 2.0 * n_f) {
        return Err(CliError::Config(format!(
            "gamma = {} must lie strictly inside (n, 2n) = ({n_f}, {})",
            block.gamma,
            2.0 * n_f
        )));
    }
    let phi = match phi_flag.or(block.phi.as_deref()) {
        None | Some("power") => PhiKind::PowerGamma,
        Some("psidelta") => PhiKind::PsiOnePlusDelta,
        Some(other) => {
            return Err(CliError::Config(format!("unknown phi `{other}` (power|psidelta)")))
        }
    };
    let overrides = ParamOverrides {
        theta1: block.theta1,
        eta_star: block.eta_star,
        r_star: block.r_star,
        h3: block.h3,
        ..Default::default()
    };
    let (params, tables) = match derive_params(&spec, block.gamma, &overrides) {
        Ok(ok) => ok,
        Err(LyapunovError::Search { trace }) => {
            return Err(CliError::Runtime(format!("no admissible parameters found:\n{trace}")))
        }
        Err(e) => return Err(runtime(e)),
    };
    let grid = VerifyGrid {
        n_radii: block.n_radii.unwrap_or(200),
        r_max_factor: block.r_max_factor.unwrap_or(100.0),
        n_theta_per_region: block.n_theta_per_region.unwrap_or(40),
    };
    let cert = verify_drift(&spec, &params, &tables, &grid, phi).map_err(runtime)?;
    let rd = RunDir::create(out, config_text)?;
    rd.write("certificate.txt", &cert.report(&params))?;
    rd.write("g_p2.csv", &tables.g_p2.to_csv())?;
    rd.write("g_p3.csv", &tables.g_p3.to_csv())?;
    let mut s = String::new();
    let _ = writeln!(s, "kind=lyapunov");
    let _ = writeln!(s, "gamma={}", block.gamma);
    let _ = writeln!(s, "phi={:?}", phi);
    let _ = writeln!(s, "m={}", cert.m);
    let _ = writeln!(s, "b={}", cert.b);
    let _ = writeln!(s, "worst_margin={}", cert.worst_margin);
    let _ = writeln!(s, "violations={}", cert.violations.len());
    rd.write("summary.txt", &s)
}

pub fn cmd_spikes(
    cfg: &ConfigFile,
    config_text: &str,
    out: &Path,
    seed: Option<u64>,
    clock_flag: Option<&str>,
) -> Result<(), CliError> {
    let spec = system_spec(cfg)?;
    let block = cfg.spikes.clone().unwrap_or_default();
    let clock = match clock_flag.or(block.clock.as_deref()) {
        None | Some("plain") => Clock::Plain,
        Some("timechanged") => Clock::TimeChanged,
        Some(other) => {
            return Err(CliError::Config(format!("unknown clock `{other}` (plain|timechanged)")))
        }
    };
    let mut exp = SpikeExperiment::preset(spec.n());
    exp.sigma = spec.sigma();
    exp.seed = seed_of(cfg, seed);
    if let Some(v) = block.r_low {
        exp.r_low = v;
    }
    if let Some(v) = &block.levels {
        exp.levels = v.clone();
    } else if let (Some(lo), Some(hi)) = (block.level_lo, block.level_hi) {
        exp.levels = log_levels(lo, hi, block.n_levels.unwrap_or(5));
    }
    if let Some(v) = block.n_traj {
        exp.n_traj = v;
    }
    if let Some(v) = block.t_per_traj {
        exp.t_per_traj = v;
    }
    let outcome = run_spikes(&exp, clock).map_err(runtime)?;
    let rd = RunDir::create(out, config_text)?;
    let mut csv = String::from("level,count,mean_gap,se\n");
    for l in &outcome.per_level {
        let _ = writeln!(csv, "{},{},{},{}", l.level, l.count, l.mean_gap, l.se);
    }
    rd.write("spikes.csv", &csv)?;
    let mut s = String::new();
    let _ = writeln!(s, "kind=spikes");
    let _ = writeln!(s, "clock={:?}", clock);
    let _ = writeln!(s, "seed={}", exp.seed);
    let _ = writeln!(s, "slope={}", outcome.slope);
    let _ = writeln!(s, "intercept={}", outcome.intercept);
    let _ = writeln!(s, "residual={}", outcome.residual);
    rd.write("summary.txt", &s)
}

pub fn cmd_tail(
    cfg: &ConfigFile,
    config_text: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let spec = system_spec(cfg)?;
    let block = cfg.tail.clone().unwrap_or_default();
    let mut exp = TailExperiment { n: spec.n(), sigma: spec.sigma(), ..Default::default() };
    exp.seed = seed_of(cfg, seed);
    if let Some(v) = block.time_changed {
        exp.time_changed = v;
    }
    if let Some(v) = block.n_traj {
        exp.n_traj = v;
    }
    if let Some(v) = block.t_per_traj {
        exp.t_per_traj = v;
    }
    if let Some(v) = block.sample_dt {
        exp.sample_dt = v;
    }
    if let Some(v) = block.r_moderate {
        exp.r_moderate = v;
    }
    if let Some(v) = block.n_levels {
        exp.n_levels = v;
    }
    let outcome = run_tail(&exp).map_err(runtime)?;
    let rd = RunDir::create(out, config_text)?;
    let mut csv = String::from("level,survival,count\n");
    for i in 0..outcome.fit.levels.len() {
        let _ = writeln!(
            csv,
            "{},{},{}",
            outcome.fit.levels[i], outcome.fit.survival[i], outcome.fit.counts[i]
        );
    }
    rd.write("tail.csv", &csv)?;
    let mut s = String::new();
    let _ = writeln!(s, "kind=tail");
    let _ = writeln!(s, "time_changed={}", exp.time_changed);
    let _ = writeln!(s, "seed={}", exp.seed);
    let _ = writeln!(s, "n_samples={}", outcome.n_samples);
    let _ = writeln!(s, "mean_r={}", outcome.mean_r);
    let _ = writeln!(s, "mean_r_se={}", outcome.mean_r_se);
    let _ = writeln!(s, "slope={}", outcome.fit.slope);
    let _ = writeln!(s, "intercept={}", outcome.fit.intercept);
    let _ = writeln!(s, "residual={}", outcome.fit.residual);
    let _ = writeln!(s, "window_lo={}", outcome.fit.levels[outcome.fit.window.0]);
    let _ = writeln!(s, "window_hi={}", outcome.fit.levels[outcome.fit.window.1]);
    rd.write("summary.txt", &s)
}

pub fn cmd_moments(
    cfg: &ConfigFile,
    config_text: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let spec = system_spec(cfg)?;
    let block = require(&cfg.moments, "moments")?;
    let rd = RunDir::create(out, config_text)?;
    let mut s = String::new();
    let _ = writeln!(s, "kind=moments");
    for &gamma in &block.gammas {
        if !(gamma > 0.0) {
            return Err(CliError::Config(format!("gamma = {gamma} must be positive")));
        }
        let mut exp = MomentExperiment {
            n: spec.n(),
            sigma: spec.sigma(),
            gamma,
            seed: seed_of(cfg, seed),
            ..Default::default()
        };
        if let Some(v) = block.t_total {
            exp.t_total = v;
        }
        if let Some(v) = block.first_span {
            exp.first_span = v;
        }
        let series = run_moments(&exp).map_err(runtime)?;
        let mut csv = String::from("count,estimate\n");
        for (c, e) in series.counts.iter().zip(&series.estimates) {
            let _ = writeln!(csv, "{c},{e}");
        }
        rd.write(&format!("moments_gamma_{gamma}.csv"), &csv)?;
        let _ = writeln!(s, "gamma_{gamma}={:?}", series.verdict);
    }
    rd.write("summary.txt", &s)
}

pub fn cmd_exitrate(
    cfg: &ConfigFile,
    config_text: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let spec = system_spec(cfg)?;
    let block = cfg.exitrate.clone().unwrap_or_default();
    let mut exp = ExitRateExperiment {
        n: spec.n(),
        sigma: spec.sigma(),
        seed: seed_of(cfg, seed),
        ..Default::default()
    };
    if let Some(v) = block.eta_star {
        exp.eta_star = v;
    }
    if let Some(v) = block.r0 {
        exp.r0 = v;
    }
    if let Some(v) = block.n_paths {
        exp.n_paths = v;
    }
    let outcome = run_exit_rate(&exp).map_err(runtime)?;
    let rd = RunDir::create(out, config_text)?;
    let mut s = String::new();
    let _ = writeln!(s, "kind=exitrate");
    let _ = writeln!(s, "eta_star={}", exp.eta_star);
    let _ = writeln!(s, "rate={}", outcome.rate);
    let _ = writeln!(s, "se={}", outcome.se);
    let _ = writeln!(s, "lambda1={}", outcome.lambda1);
    let _ = writeln!(s, "rel_diff={}", (outcome.rate - outcome.lambda1).abs() / outcome.lambda1);
    let _ = writeln!(s, "n_exits={}", outcome.n_exits);
    let _ = writeln!(s, "n_censored={}", outcome.n_censored);
    rd.write("summary.txt", &s)
}

pub fn cmd_eigen(cfg: &ConfigFile, config_text: &str, out: &Path) -> Result<(), CliError> {
    let spec = system_spec(cfg)?;
    let block = require(&cfg.eigen, "eigen")?;
    let grid = block.grid_size.unwrap_or(8192);
    let lambda1 =
        smallest_eigenvalue(block.eta_star, spec.sigma(), spec.n(), grid).map_err(runtime)?;
    let limit = (3.0 * spec.n() as f64 + 2.0) / 2.0;
    let rd = RunDir::create(out, config_text)?;
    let mut s = String::new();
    let _ = writeln!(s, "kind=eigen");
    let _ = writeln!(s, "eta_star={}", block.eta_star);
    let _ = writeln!(s, "grid_size={grid}");
    let _ = writeln!(s, "lambda1={lambda1}");
    let _ = writeln!(s, "limit={limit}");
    let _ = writeln!(s, "rel_err={}", (lambda1 - limit).abs() / limit);
    rd.write("summary.txt", &s)
}

pub fn cmd_exitmoments(
    cfg: &ConfigFile,
    config_text: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let block = cfg.exitmoments.clone().unwrap_or_default();
    let mut exp = ExitMomentCompare { seed: seed_of(cfg, seed), ..Default::default() };
    if let Some(rows) = &block.rows {
        exp.rows = rows.clone();
    }
    if let Some(v) = block.n_points {
        exp.n_points = v;
    }
    if let Some(v) = block.n_paths {
        exp.n_paths = v;
    }
    if let Some(v) = block.dt {
        exp.dt = v;
    }
    let rows = run_exitmoment_compare(&exp).map_err(runtime)?;
    let rd = RunDir::create(out, config_text)?;
    let mut csv = String::from("n,sigma,a,eta_star,eta0,bvp,mc,mc_se\n");
    for row in &rows {
        for &(eta0, bvp, mc, se) in &row.points {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                row.n, row.sigma, row.a, row.eta_star, eta0, bvp, mc, se
            );
        }
    }
    rd.write("exitmoments.csv", &csv)?;
    let mut s = String::new();
    let _ = writeln!(s, "kind=exitmoments");
    for row in &rows {
        let _ = writeln!(
            s,
            "row_n{}_sigma{}_a{:.4}: max_rel_err={} max_z={}",
            row.n, row.sigma, row.a, row.max_rel_err, row.max_z_score
        );
    }
    rd.write("summary.txt", &s)
}

// Build the tables for a standalone lyapunov verification when parameters
// are fully pinned; used by tests.
pub fn pinned_certificate(
    spec: &SystemSpec,
    params: &polystab::lyapunov::LyapunovParams,
    phi: PhiKind,
) -> Result<polystab::lyapunov::Certificate, CliError> {
    let tables = build_tables(params, spec.sigma()).map_err(runtime)?;
    verify_drift(spec, params, &tables, &VerifyGrid::default(), phi).map_err(runtime)
}
