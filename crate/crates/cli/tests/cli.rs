//! End-to-end tests of the command-line harness: exit codes, config
//! validation, determinism of outputs, and the documented file layouts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_polystab")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("polystab-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn missing_required_key_names_it_and_exits_2() {
    let dir = tmpdir("missing-n");
    let cfg = write_config(&dir, "bad.toml", "[system]\nsigma = 1.0\n");
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`n`") || err.contains("missing field `n`"), "stderr: {err}");
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tmpdir("unknown-key");
    let cfg = write_config(
        &dir,
        "bad.toml",
        "[system]\nn = 1\nsigma = 1.0\nbogus_knob = 3\n",
    );
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_knob"));
}

#[test]
fn simulate_is_deterministic_and_records_spikes() {
    let dir = tmpdir("sim-det");
    // The long-horizon single-trajectory recipe: n = 1, monomial, σ = 1.
    let cfg = write_config(
        &dir,
        "fig.toml",
        r#"
seed = 12
[system]
n = 1
sigma = 1.0
[integrator]
t_max = 15000.0
thin_stride = 200
[simulate]
z0 = [0.0, 0.0]
"#,
    );
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let res = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let traj_a = fs::read(out_a.join("trajectory.csv")).unwrap();
    let traj_b = fs::read(out_b.join("trajectory.csv")).unwrap();
    assert_eq!(traj_a, traj_b, "same config and seed must give identical bytes");
    assert_eq!(
        fs::read(out_a.join("summary.txt")).unwrap(),
        fs::read(out_b.join("summary.txt")).unwrap()
    );

    // Intermittency: the |z| series spikes far above its median.
    let text = String::from_utf8(traj_a).unwrap();
    let mut radii: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let mut it = l.split(',');
            let _t: f64 = it.next().unwrap().parse().unwrap();
            let re: f64 = it.next().unwrap().parse().unwrap();
            let im: f64 = it.next().unwrap().parse().unwrap();
            (re * re + im * im).sqrt()
        })
        .collect();
    assert!(radii.len() > 10_000);
    let max = radii.iter().cloned().fold(0.0f64, f64::max);
    radii.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let median = radii[radii.len() / 2];
    assert!(
        max > 10.0 * median,
        "no spikes: max {max}, median {median}"
    );
    // A different seed changes the bytes.
    let out_c = dir.join("c");
    let res = run(&[
        "simulate", "--config", cfg.to_str().unwrap(),
        "--out", out_c.to_str().unwrap(), "--seed", "13",
    ]);
    assert_eq!(res.status.code(), Some(0));
    assert_ne!(fs::read(out_c.join("trajectory.csv")).unwrap(), traj_b);
}

#[test]
fn lyapunov_rejects_endpoint_gamma_and_certifies_interior() {
    let dir = tmpdir("lyap");
    let bad = write_config(
        &dir,
        "bad.toml",
        "[system]\nn = 1\nsigma = 1.0\n[lyapunov]\ngamma = 2.0\n",
    );
    let out = run(&["lyapunov", "--config", bad.to_str().unwrap(), "--out", dir.join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let good = write_config(
        &dir,
        "good.toml",
        "[system]\nn = 1\nsigma = 1.0\n[lyapunov]\ngamma = 1.5\nn_radii = 80\nn_theta_per_region = 16\n",
    );
    let run_dir = dir.join("run");
    let out = run(&[
        "lyapunov", "--config", good.to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(), "--phi", "psidelta",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cert = fs::read_to_string(run_dir.join("certificate.txt")).unwrap();
    assert!(cert.contains("violations=0"));
    assert!(cert.contains("phi=psidelta"));
    assert!(run_dir.join("g_p2.csv").exists() && run_dir.join("g_p3.csv").exists());
    let summary = fs::read_to_string(run_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("m="));
    assert!(run_dir.join("config_snapshot.toml").exists());
}

#[test]
fn spikes_tail_and_eigen_write_plot_ready_files() {
    let dir = tmpdir("small-exps");
    let cfg = write_config(
        &dir,
        "exp.toml",
        r#"
seed = 3
[system]
n = 1
sigma = 1.0
[spikes]
r_low = 2.0
levels = [6.0, 10.0, 17.0]
n_traj = 4
t_per_traj = 4000.0
[tail]
n_traj = 4
t_per_traj = 4000.0
sample_dt = 0.05
[eigen]
eta_star = 50.0
grid_size = 4096
"#,
    );
    let spikes_dir = dir.join("spikes");
    let out = run(&["spikes", "--config", cfg.to_str().unwrap(), "--out", spikes_dir.to_str().unwrap(), "--clock", "plain"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(spikes_dir.join("spikes.csv")).unwrap();
    assert!(csv.starts_with("level,count,mean_gap,se\n"));
    assert_eq!(csv.lines().count(), 4);
    let summary = fs::read_to_string(spikes_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("slope="));

    let tail_dir = dir.join("tail");
    let out = run(&["tail", "--config", cfg.to_str().unwrap(), "--out", tail_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tail_dir.join("tail.csv")).unwrap();
    assert!(csv.starts_with("level,survival,count\n"));

    let eigen_dir = dir.join("eigen");
    let out = run(&["eigen", "--config", cfg.to_str().unwrap(), "--out", eigen_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(eigen_dir.join("summary.txt")).unwrap();
    let lambda: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("lambda1="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((lambda - 2.5).abs() / 2.5 < 0.05, "lambda1 = {lambda}");
}

#[test]
fn exitmoments_small_grid_runs() {
    let dir = tmpdir("exitmom");
    let cfg = write_config(
        &dir,
        "exp.toml",
        r#"
seed = 4
[exitmoments]
rows = [[1, 1.0, 0.4, 4.0]]
n_points = 3
n_paths = 4000
dt = 5e-4
"#,
    );
    let run_dir = dir.join("run");
    let out = run(&["exitmoments", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(run_dir.join("exitmoments.csv")).unwrap();
    assert!(csv.starts_with("n,sigma,a,eta_star,eta0,bvp,mc,mc_se\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn help_documents_config_keys_and_columns() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["dt_base", "drift_cap_eps", "r_cap", "eta_star", "gamma", "coeffs", "sigma"] {
        assert!(text.contains(key), "--help misses `{key}`");
    }
    let out = run(&["spikes", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("level,count,mean_gap,se"));
    let out = run(&["tail", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("level,survival,count"));
}

#[test]
fn config_is_required() {
    let out = run(&["simulate"]);
    assert_eq!(out.status.code(), Some(2));
}
