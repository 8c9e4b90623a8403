use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use polystab_cli::{
    cmd_eigen, cmd_exitmoments, cmd_exitrate, cmd_lyapunov, cmd_moments, cmd_simulate,
    cmd_spikes, cmd_tail, load_config, CliError,
};

const CONFIG_KEYS: &str = "\
Config file keys (TOML):
  seed                     integer; RNG master seed (flag --seed overrides)
  workers                  integer; rayon worker count (flag --workers overrides)
  out_dir                  string; run directory (flag --out overrides)

  [system]                 the SDE dz = [z^{n+1} + F(z,zbar)] dt + sigma dB
    n                      drift degree offset, n >= 1
    sigma                  noise intensity, >= 0
    coeffs                 rows [j, k, re, im] of F = sum c_jk z^j zbar^k; deg <= n

  [integrator]             all optional
    dt_base                base time step (default 1e-3)
    drift_cap_eps          max |drift|*dt displacement per step (default 0.05)
    r_cap                  explosion guard radius (default 1e6)
    t_max                  horizon (default 100)
    mode                   cartesian | timechanged | deterministic
    thin_stride            store every k-th step (default 100)
    r_min                  polar reflecting floor (default 1e-3)
    angle_noise_cap        polar angular-noise step cap (default 0.1)

  [simulate]   z0 = [re, im]                  initial condition
  [lyapunov]   gamma (required, in (n, 2n)); phi = \"power\"|\"psidelta\";
               n_radii, r_max_factor, n_theta_per_region   verification grid;
               theta1, eta_star, r_star, h3                 pin search values
  [spikes]     clock = \"plain\"|\"timechanged\"; r_low; levels = [..] or
               level_lo/level_hi/n_levels; n_traj; t_per_traj
  [tail]       time_changed; n_traj; t_per_traj; sample_dt; r_moderate; n_levels
  [moments]    gammas = [..] (required); t_total; first_span
  [exitrate]   eta_star; r0; n_paths
  [eigen]      eta_star (required); grid_size
  [exitmoments] rows = [[n, sigma, a_frac, eta_star], ..]; n_points; n_paths; dt
";

/// Experiment harness for noise-stabilized complex polynomial SDEs.
#[derive(Parser)]
#[command(name = "polystab", version, after_long_help = CONFIG_KEYS)]
struct Cli {
    /// Path to the TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for ensembles; overrides the config key.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides the config key.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory; writes trajectory.csv (t,re,im or
    /// t,r,theta,t_physical) and summary.txt.
    Simulate,
    /// Search Lyapunov parameters and verify the drift inequality; writes
    /// certificate.txt, g_p2.csv/g_p3.csv (eta,G,Gprime) and summary.txt.
    Lyapunov {
        /// Comparison function: power (r^gamma) or psidelta (Psi^{1+delta}).
        #[arg(long)]
        phi: Option<String>,
    },
    /// Inter-spike spacing versus level; writes spikes.csv
    /// (level,count,mean_gap,se) and summary.txt with the log-log slope.
    Spikes {
        /// Which clock to measure gaps on: plain or timechanged.
        #[arg(long)]
        clock: Option<String>,
    },
    /// Stationary tail survival of |z|; writes tail.csv
    /// (level,survival,count) and summary.txt with the fitted exponent.
    Tail,
    /// Running-mean convergence verdicts of |z|^gamma; writes
    /// moments_gamma_*.csv (count,estimate) and summary.txt.
    Moments,
    /// Exit-time tail rate of the rescaled-angle strip versus the killed
    /// generator eigenvalue; writes summary.txt.
    Exitrate,
    /// Smallest eigenvalue of the killed generator on [-eta*, eta*];
    /// writes summary.txt.
    Eigen,
    /// Exit-moment BVP versus Monte-Carlo comparison grid; writes
    /// exitmoments.csv (n,sigma,a,eta_star,eta0,bvp,mc,mc_se) and summary.txt.
    Exitmoments,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let (cfg, text) = load_config(&config_path)?;
    if let Some(workers) = cli.workers.or(cfg.workers) {
        // Ignore the error when a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    let out = cli
        .out
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Config("no output directory: set out_dir or pass --out".into()))?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, &text, &out, cli.seed),
        Command::Lyapunov { phi } => cmd_lyapunov(&cfg, &text, &out, phi.as_deref()),
        Command::Spikes { clock } => cmd_spikes(&cfg, &text, &out, cli.seed, clock.as_deref()),
        Command::Tail => cmd_tail(&cfg, &text, &out, cli.seed),
        Command::Moments => cmd_moments(&cfg, &text, &out, cli.seed),
        Command::Exitrate => cmd_exitrate(&cfg, &text, &out, cli.seed),
        Command::Eigen => cmd_eigen(&cfg, &text, &out),
        Command::Exitmoments => cmd_exitmoments(&cfg, &text, &out, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
