//! End-to-end experiment protocols shared by the CLI and the acceptance
//! suite.  Every protocol is a pure function of its configuration and seed:
//! trajectories run on derived RNG substreams and results merge in
//! trajectory-index order, so outputs are byte-reproducible and independent
//! of the worker count.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::exitmoments::{mc_exit_moment, solve_bvp, OuSpec};
use crate::model::{orbit_k, wedge_reduce, PolarPoint, SystemSpec};
use crate::simulate::{integrate_observed, run_ensemble, IntegratorConfig, Mode, StepInfo};
use crate::stats::{
    fit_loglog, ks_critical, ks_statistic, log_levels, tail_survival, Clock, MomentSeries,
    SpikeDetector, StatsError, TailFit,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("simulation failed: {0}")]
    Sim(#[from] crate::simulate::SimError),
    #[error("statistics failed: {0}")]
    Stats(#[from] StatsError),
    #[error("exit-moment computation failed: {0}")]
    Exit(#[from] crate::exitmoments::ExitError),
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn plain_cfg(t_max: f64) -> IntegratorConfig {
    IntegratorConfig { t_max, mode: Mode::Cartesian, ..Default::default() }
}

fn polar_cfg(t_max: f64) -> IntegratorConfig {
    IntegratorConfig { t_max, mode: Mode::TimeChangedPolar, r_min: 0.05, ..Default::default() }
}

/// Linear-in-time resampling of the step stream onto a uniform grid; the
/// radius is interpolated inside each accepted step.  Sampling uniformly in
/// time (rather than every k-th step) keeps the empirical law unbiased under
/// the adaptive step size.
struct UniformSampler {
    next_t: f64,
    dt: f64,
}

impl UniformSampler {
    fn new(start: f64, dt: f64) -> Self {
        Self { next_t: start + dt, dt }
    }

    #[inline]
    fn feed(&mut self, info: &StepInfo, mut emit: impl FnMut(f64)) {
        while self.next_t <= info.t {
            let w = ((info.t - self.next_t) / info.dt).clamp(0.0, 1.0);
            emit(info.r + w * (info.r_prev - info.r));
            self.next_t += self.dt;
        }
    }
}

// ---------------------------------------------------------------------------
// spike spacing

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpikeExperiment {
    pub n: u32,
    pub sigma: f64,
    pub r_low: f64,
    pub levels: Vec<f64>,
    pub n_traj: usize,
    pub t_per_traj: f64,
    /// Floor of the slow clock's `r^{-n}` rate.  For n ≥ 2 the raw
    /// time-changed clock has infinite-mean contributions from near-origin
    /// passages, so the clock must be regularized; the floor only rescales
    /// the cycle constant, never the level scaling.
    pub clock_floor: f64,
    pub seed: u64,
}

impl Default for SpikeExperiment {
    fn default() -> Self {
        Self::preset(1)
    }
}

impl SpikeExperiment {
    /// Level grids span one decade; the per-`n` budgets are sized so the top
    /// level still collects enough gaps while per-trajectory horizons stay
    /// long against the top-level mean gap (censored-gap bias).
    pub fn preset(n: u32) -> Self {
        let (r_low, lo, n_traj, t_per_traj) = match n {
            1 => (2.0, 10.0, 16, 40_000.0),
            2 => (1.5, 5.0, 8, 250_000.0),
            _ => (1.1, 2.5, 8, 540_000.0),
        };
        Self {
            n,
            sigma: 1.0,
            r_low,
            levels: log_levels(lo, 10.0 * lo, 5),
            n_traj,
            t_per_traj,
            clock_floor: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpikeLevelSummary {
    pub level: f64,
    pub count: usize,
    pub mean_gap: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpikesOutcome {
    pub clock: Clock,
    pub per_level: Vec<SpikeLevelSummary>,
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
}

fn summarize_levels(
    levels: &[f64],
    merged: Vec<Vec<f64>>,
    clock: Clock,
) -> Result<SpikesOutcome> {
    let mut per_level = Vec::new();
    for (i, gaps) in merged.iter().enumerate() {
        if gaps.len() < 20 {
            return Err(StatsError::InsufficientData(format!(
                "level {} collected only {} gaps",
                levels[i],
                gaps.len()
            ))
            .into());
        }
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0);
        per_level.push(SpikeLevelSummary {
            level: levels[i],
            count: gaps.len(),
            mean_gap: mean,
            se: (var / n).sqrt(),
        });
    }
    let pts: Vec<(f64, f64)> = per_level.iter().map(|s| (s.level, s.mean_gap)).collect();
    let (slope, intercept, residual) = fit_loglog(&pts)?;
    Ok(SpikesOutcome { clock, per_level, slope, intercept, residual })
}

/// Run the spike experiment measuring gaps on both clocks of the same
/// trajectories: crossings are clock-invariant, and the slow clock is the
/// pathwise integral `∫ max(r, floor)^{-n} dt` of the plain run.
pub fn run_spikes_dual(exp: &SpikeExperiment) -> Result<(SpikesOutcome, SpikesOutcome)> {
    let spec = SystemSpec::monomial(exp.n, exp.sigma);
    let cfg = plain_cfg(exp.t_per_traj);
    let levels = exp.levels.clone();
    let r_low = exp.r_low;
    let n_i = exp.n as i32;
    let floor = exp.clock_floor;

    type GapPair = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let per_traj: Vec<std::result::Result<GapPair, crate::simulate::SimError>> =
        run_ensemble(exp.n_traj, exp.seed, |_, mut rng| {
            let mut plain: Vec<SpikeDetector> = levels
                .iter()
                .map(|&l| SpikeDetector::new(r_low, l).expect("validated levels"))
                .collect();
            let mut slow: Vec<SpikeDetector> = levels
                .iter()
                .map(|&l| SpikeDetector::new(r_low, l).expect("validated levels"))
                .collect();
            let mut s_clock = 0.0f64;
            let z0 = Complex64::new(0.2, 0.0);
            integrate_observed(&spec, z0, &cfg, &mut rng, |info| {
                s_clock += info.dt / info.r_prev.max(floor).powi(n_i);
                for d in plain.iter_mut() {
                    d.observe(info.t, info.r);
                }
                for d in slow.iter_mut() {
                    d.observe(s_clock, info.r);
                }
                true
            })
            .map(|_| {
                (
                    plain.into_iter().map(|d| d.gaps).collect::<Vec<_>>(),
                    slow.into_iter().map(|d| d.gaps).collect::<Vec<_>>(),
                )
            })
        });

    let mut merged_plain: Vec<Vec<f64>> = vec![Vec::new(); exp.levels.len()];
    let mut merged_slow: Vec<Vec<f64>> = vec![Vec::new(); exp.levels.len()];
    for traj in per_traj {
        let (p, s) = traj?;
        for (i, g) in p.into_iter().enumerate() {
            merged_plain[i].extend(g);
        }
        for (i, g) in s.into_iter().enumerate() {
            merged_slow[i].extend(g);
        }
    }
    Ok((
        summarize_levels(&exp.levels, merged_plain, Clock::Plain)?,
        summarize_levels(&exp.levels, merged_slow, Clock::TimeChanged)?,
    ))
}

pub fn run_spikes(exp: &SpikeExperiment, clock: Clock) -> Result<SpikesOutcome> {
    let (plain, slow) = run_spikes_dual(exp)?;
    Ok(match clock {
        Clock::Plain => plain,
        Clock::TimeChanged => slow,
    })
}

// ---------------------------------------------------------------------------
// stationary tail

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailExperiment {
    pub n: u32,
    pub sigma: f64,
    pub time_changed: bool,
    pub n_traj: usize,
    pub t_per_traj: f64,
    pub sample_dt: f64,
    /// Moderate radius used for burn-in and the fit-window rule.
    pub r_moderate: f64,
    pub n_levels: usize,
    pub seed: u64,
}

impl Default for TailExperiment {
    fn default() -> Self {
        Self {
            n: 1,
            sigma: 1.0,
            time_changed: false,
            n_traj: 16,
            t_per_traj: 36_000.0,
            sample_dt: 0.05,
            r_moderate: 2.0,
            n_levels: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailOutcome {
    pub fit: TailFit,
    pub n_samples: usize,
    /// Mean |z| with its batch-means standard error (20 batches).
    pub mean_r: f64,
    pub mean_r_se: f64,
}

/// Thinned stationary |z| samples from an ensemble, merged in index order.
pub fn stationary_samples(exp: &TailExperiment) -> Result<Vec<f64>> {
    let spec = SystemSpec::monomial(exp.n, exp.sigma);
    let cfg = if exp.time_changed {
        polar_cfg(exp.t_per_traj)
    } else {
        plain_cfg(exp.t_per_traj)
    };
    let burn_frac = 0.1;
    let r_mod = exp.r_moderate;
    let per_traj: Vec<std::result::Result<Vec<f64>, crate::simulate::SimError>> =
        run_ensemble(exp.n_traj, exp.seed, |_, mut rng| {
            let mut out = Vec::new();
            let mut sampler = UniformSampler::new(0.0, exp.sample_dt);
            let mut burned_time = false;
            let mut returned = false;
            let z0 = Complex64::new(0.5, 0.0);
            integrate_observed(&spec, z0, &cfg, &mut rng, |info| {
                // Burn-in: a tenth of the horizon, or the first return to
                // the moderate set, whichever is later.
                if !burned_time {
                    burned_time = info.t >= burn_frac * exp.t_per_traj;
                }
                if !returned {
                    returned = info.r <= r_mod;
                    sampler.next_t = info.t + exp.sample_dt;
                    return true;
                }
                if !burned_time {
                    sampler.next_t = info.t + exp.sample_dt;
                    return true;
                }
                sampler.feed(info, |r| out.push(r));
                true
            })
            .map(|_| out)
        });
    let mut samples = Vec::new();
    for traj in per_traj {
        samples.extend(traj?);
    }
    Ok(samples)
}

pub fn run_tail(exp: &TailExperiment) -> Result<TailOutcome> {
    let samples = stationary_samples(exp)?;
    if samples.len() < 10_000 {
        return Err(StatsError::InsufficientData(format!(
            "only {} stationary samples",
            samples.len()
        ))
        .into());
    }
    let mut sorted = samples.clone();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite radii"));
    let top = sorted[sorted.len() - crate::stats::MIN_EXCEEDANCES];
    let levels = log_levels(exp.r_moderate, top, exp.n_levels);
    let fit = tail_survival(&samples, &levels, exp.r_moderate)?;
    let (mean_r, mean_r_se) = crate::stats::batch_mean_se(&samples);
    Ok(TailOutcome { fit, n_samples: samples.len(), mean_r, mean_r_se })
}

// ---------------------------------------------------------------------------
// moment threshold

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentExperiment {
    pub n: u32,
    pub sigma: f64,
    pub gamma: f64,
    pub t_total: f64,
    /// Time span of the first checkpoint; later checkpoints double it.
    pub first_span: f64,
    pub r_moderate: f64,
    pub seed: u64,
}

impl Default for MomentExperiment {
    fn default() -> Self {
        Self {
            n: 1,
            sigma: 1.0,
            gamma: 1.0,
            t_total: 600_000.0,
            first_span: 64.0,
            r_moderate: 2.0,
            seed: 0,
        }
    }
}

/// Running time-averages of `|z_t|^γ`, checkpointed at doublings of the
/// accumulated time.  The integral is taken step by step (trapezoid in
/// `r^γ`), so the adaptive integrator resolves each spike's dwell exactly;
/// a fixed sampling grid would truncate the tallest excursions and bias the
/// growth of a divergent moment downward.
pub fn run_moments(exp: &MomentExperiment) -> Result<MomentSeries> {
    let spec = SystemSpec::monomial(exp.n, exp.sigma);
    let cfg = plain_cfg(exp.t_total);
    let mut rng = crate::rng::substream(exp.seed, 0);
    let burn_t = exp.first_span;
    let first_span = exp.first_span;
    let mut returned = false;
    let mut burned = false;
    let mut t0 = 0.0f64;
    let mut integral = 0.0f64;
    let mut steps = 0usize;
    let mut next_span = first_span;
    let mut counts = Vec::new();
    let mut estimates = Vec::new();
    integrate_observed(&spec, Complex64::new(0.5, 0.0), &cfg, &mut rng, |info| {
        if !burned {
            returned = returned || info.r <= exp.r_moderate;
            burned = returned && info.t >= burn_t;
            t0 = info.t;
            return true;
        }
        integral += 0.5 * (info.r_prev.powf(exp.gamma) + info.r.powf(exp.gamma)) * info.dt;
        steps += 1;
        let span = info.t - t0;
        if span >= next_span {
            counts.push(steps);
            estimates.push(integral / span);
            next_span *= 2.0;
        }
        true
    })?;
    let verdict = crate::stats::verdict_from_series(&estimates);
    Ok(MomentSeries { gamma: exp.gamma, counts, estimates, verdict })
}

// ---------------------------------------------------------------------------
// exit-time tail rate of the rescaled-angle strip

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExitRateExperiment {
    pub n: u32,
    pub sigma: f64,
    pub eta_star: f64,
    /// Launch radius; large enough that the strip sits in the far field.
    pub r0: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for ExitRateExperiment {
    fn default() -> Self {
        Self { n: 1, sigma: 1.0, eta_star: 50.0, r0: 100.0, n_paths: 20_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitRateOutcome {
    pub rate: f64,
    pub se: f64,
    pub n_exits: usize,
    pub n_censored: usize,
    /// λ₁ of the killed generator at the same η*, for comparison.
    pub lambda1: f64,
}

pub fn run_exit_rate(exp: &ExitRateExperiment) -> Result<ExitRateOutcome> {
    let spec = SystemSpec::monomial(exp.n, exp.sigma);
    let n = exp.n;
    let s_exp = (n as f64 + 2.0) / 2.0;
    let mut cfg = polar_cfg(60.0 / (1.5 * n as f64 + 1.0) + 10.0);
    cfg.r_cap = 1e12;
    let r_floor = exp.r0 * 0.25;
    let taus: Vec<Option<f64>> = run_ensemble(exp.n_paths, exp.seed, |_, mut rng| {
        let mut exit_t = None;
        let mut censored = false;
        let z0 = Complex64::new(exp.r0, 0.0);
        integrate_observed(&spec, z0, &cfg, &mut rng, |info| {
            if info.r < r_floor {
                censored = true;
                return false;
            }
            let (tp, _) = wedge_reduce(info.theta, n);
            if tp.abs() * info.r.powf(s_exp) >= exp.eta_star {
                exit_t = Some(info.t);
                return false;
            }
            true
        })
        .expect("polar integration");
        if censored {
            None
        } else {
            exit_t
        }
    });
    let exits: Vec<f64> = taus.iter().flatten().copied().collect();
    let n_censored = exp.n_paths - exits.len();
    let (rate, se) = crate::stats::exit_tail_rate(&exits)?;
    let lambda1 = crate::exitmoments::smallest_eigenvalue(exp.eta_star, exp.sigma, exp.n, 8192)?;
    Ok(ExitRateOutcome { rate, se, n_exits: exits.len(), n_censored, lambda1 })
}

// ---------------------------------------------------------------------------
// spike-height law at the strip exit, on both clocks

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KtauExperiment {
    pub n: u32,
    pub sigma: f64,
    pub r_star: f64,
    pub eta_star: f64,
    pub n_traj: usize,
    pub t_per_traj: f64,
    pub seed: u64,
}

impl Default for KtauExperiment {
    fn default() -> Self {
        Self { n: 1, sigma: 1.0, r_star: 2.0, eta_star: 6.0, n_traj: 16, t_per_traj: 30_000.0, seed: 0 }
    }
}

/// Tracks entries into the strip `S(η*, 2r*)` through `{r = 2r*}` and
/// records the orbit constant at each exit through `|η| = η*`.
struct StripTracker {
    n: u32,
    two_r_star: f64,
    eta_star: f64,
    s_exp: f64,
    in_strip: bool,
    /// Exit points `(r, θ)` through `|η| = η*`.
    exits: Vec<(f64, f64)>,
}

impl StripTracker {
    fn new(n: u32, r_star: f64, eta_star: f64) -> Self {
        Self {
            n,
            two_r_star: 2.0 * r_star,
            eta_star,
            s_exp: (n as f64 + 2.0) / 2.0,
            in_strip: false,
            exits: Vec::new(),
        }
    }

    #[inline]
    fn observe(&mut self, info: &StepInfo) {
        if !self.in_strip {
            if info.r_prev < self.two_r_star && info.r >= self.two_r_star {
                let (tp, _) = wedge_reduce(info.angle(), self.n);
                if tp.abs() * info.r.powf(self.s_exp) <= self.eta_star {
                    self.in_strip = true;
                }
            }
        } else if info.r < self.two_r_star {
            self.in_strip = false;
        } else {
            let theta = info.angle();
            let (tp, _) = wedge_reduce(theta, self.n);
            if tp.abs() * info.r.powf(self.s_exp) > self.eta_star {
                self.in_strip = false;
                self.exits.push((info.r, theta));
            }
        }
    }
}

/// Collect the strip exit points `(r_τ, θ_τ)` on the chosen clock.
pub fn collect_strip_exits(exp: &KtauExperiment, clock: Clock) -> Result<Vec<(f64, f64)>> {
    let spec = SystemSpec::monomial(exp.n, exp.sigma);
    let cfg = match clock {
        Clock::Plain => plain_cfg(exp.t_per_traj),
        Clock::TimeChanged => polar_cfg(exp.t_per_traj),
    };
    let per_traj: Vec<std::result::Result<Vec<(f64, f64)>, crate::simulate::SimError>> =
        run_ensemble(exp.n_traj, exp.seed, |_, mut rng| {
            let mut tracker = StripTracker::new(exp.n, exp.r_star, exp.eta_star);
            integrate_observed(&spec, Complex64::new(0.5, 0.0), &cfg, &mut rng, |info| {
                tracker.observe(info);
                true
            })
            .map(|_| tracker.exits)
        });
    let mut exits = Vec::new();
    for traj in per_traj {
        exits.extend(traj?);
    }
    Ok(exits)
}

/// Collect exit orbit constants `K_τ` on the chosen clock.
pub fn collect_ktau(exp: &KtauExperiment, clock: Clock) -> Result<Vec<f64>> {
    Ok(collect_strip_exits(exp, clock)?
        .into_iter()
        .filter_map(|(r, theta)| orbit_k(PolarPoint::new(r, theta), exp.n).ok())
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KtauMatchOutcome {
    pub n_plain: usize,
    pub n_timechanged: usize,
    pub ks_stat: f64,
    pub ks_crit_1pct: f64,
}

/// Two-sample KS comparison of the exit-height law between the plain and
/// time-changed dynamics (clock-invariant by construction of the exit set).
pub fn run_ktau_match(exp: &KtauExperiment) -> Result<KtauMatchOutcome> {
    let plain = collect_ktau(exp, Clock::Plain)?;
    let tc = collect_ktau(&KtauExperiment { seed: exp.seed + 1, ..exp.clone() }, Clock::TimeChanged)?;
    let d = ks_statistic(&plain, &tc);
    Ok(KtauMatchOutcome {
        n_plain: plain.len(),
        n_timechanged: tc.len(),
        ks_stat: d,
        ks_crit_1pct: ks_critical(0.01, plain.len(), tc.len()),
    })
}

// ---------------------------------------------------------------------------
// noise-rescaling law

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescalingExperiment {
    pub n: u32,
    pub sigma_base: f64,
    pub sigma_scaled: f64,
    pub n_samples: usize,
    /// Spacing between retained samples, in units of the base-noise clock.
    pub sample_dt: f64,
    pub n_traj: usize,
    pub seed: u64,
}

impl Default for RescalingExperiment {
    fn default() -> Self {
        Self {
            n: 1,
            sigma_base: 1.0,
            sigma_scaled: 2.0,
            n_samples: 100_000,
            sample_dt: 8.0,
            n_traj: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RescalingOutcome {
    pub ks_stat: f64,
    pub ks_crit_1pct: f64,
    pub n_base: usize,
    pub n_scaled: usize,
    pub rejected: bool,
}

/// Compare the stationary |z| law of the σ = `sigma_scaled` run, rescaled by
/// σ^{-l} with `l = 2/(n+2)`, against the σ = `sigma_base` run (whose clock
/// runs slower by σ^{l'}, `l' = 2n/(n+2)`; in stationarity only the sample
/// spacing changes).
pub fn run_rescaling(exp: &RescalingExperiment) -> Result<RescalingOutcome> {
    let n_f = exp.n as f64;
    let l = 2.0 / (n_f + 2.0);
    let lp = 2.0 * n_f / (n_f + 2.0);
    let per_traj = exp.n_samples / exp.n_traj + 1;
    let sample = |sigma: f64, dt_s: f64, seed: u64| -> Result<Vec<f64>> {
        let t_per = dt_s * per_traj as f64 * 1.25;
        let out = run_tail_samples_for(exp.n, sigma, dt_s, t_per, exp.n_traj, seed)?;
        Ok(out)
    };
    let ratio = exp.sigma_scaled / exp.sigma_base;
    let base = sample(exp.sigma_base, exp.sample_dt, exp.seed)?;
    // Matched times: the scaled run's clock is faster by ratio^{l'}.
    let scaled = sample(exp.sigma_scaled, exp.sample_dt / ratio.powf(lp), exp.seed + 1)?;
    let scale = ratio.powf(l);
    let scaled_back: Vec<f64> = scaled.iter().map(|r| r / scale).collect();
    let take = base.len().min(scaled_back.len()).min(exp.n_samples);
    let a = &base[..take];
    let b = &scaled_back[..take];
    let d = ks_statistic(a, b);
    let crit = ks_critical(0.01, a.len(), b.len());
    Ok(RescalingOutcome {
        ks_stat: d,
        ks_crit_1pct: crit,
        n_base: a.len(),
        n_scaled: b.len(),
        rejected: d > crit,
    })
}

fn run_tail_samples_for(
    n: u32,
    sigma: f64,
    sample_dt: f64,
    t_per_traj: f64,
    n_traj: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let exp = TailExperiment {
        n,
        sigma,
        time_changed: false,
        n_traj,
        t_per_traj,
        sample_dt,
        r_moderate: 2.0 * sigma.powf(2.0 / (n as f64 + 2.0)),
        n_levels: 20,
        seed,
    };
    stationary_samples(&exp)
}

// ---------------------------------------------------------------------------
// exit-moment BVP vs Monte-Carlo comparison grid

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExitMomentCompare {
    /// Rows of `(n, sigma, a as fraction of the cap (3n/2)+1, eta_star)`.
    pub rows: Vec<(u32, f64, f64, f64)>,
    pub n_points: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for ExitMomentCompare {
    fn default() -> Self {
        Self {
            rows: vec![
                (1, 1.0, 0.40, 4.0),
                (2, 1.0, 0.40, 4.0),
                (3, 1.0, 0.40, 4.0),
                (1, 0.5, 0.45, 4.0),
                (2, 0.5, 0.45, 4.0),
                (3, 0.5, 0.45, 4.0),
            ],
            n_points: 11,
            n_paths: 100_000,
            dt: 2.5e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitMomentRow {
    pub n: u32,
    pub sigma: f64,
    pub a: f64,
    pub eta_star: f64,
    /// `(eta0, bvp, mc, mc_se)` per interior point.
    pub points: Vec<(f64, f64, f64, f64)>,
    pub max_rel_err: f64,
    pub max_z_score: f64,
}

pub fn run_exitmoment_compare(exp: &ExitMomentCompare) -> Result<Vec<ExitMomentRow>> {
    let mut rows = Vec::new();
    for (row_idx, &(n, sigma, a_frac, eta_star)) in exp.rows.iter().enumerate() {
        let cap = 1.5 * n as f64 + 1.0;
        let a = a_frac * cap;
        let table = solve_bvp(a, 0.0, eta_star, sigma, n, 8192)?;
        let ou = OuSpec::for_system(n, sigma);
        let mut points = Vec::new();
        let mut max_rel = 0.0f64;
        let mut max_z = 0.0f64;
        for i in 0..exp.n_points {
            let eta0 = -eta_star + 2.0 * eta_star * (i + 1) as f64 / (exp.n_points + 1) as f64;
            let (mc, se) = mc_exit_moment(
                a,
                0.0,
                eta0,
                &ou,
                eta_star,
                exp.n_paths,
                exp.dt,
                exp.seed ^ ((row_idx as u64) << 32 | i as u64),
            )?;
            let bvp = table.g(eta0)?;
            let rel = (mc - bvp).abs() / bvp;
            let z = (mc - bvp).abs() / se.max(1e-300);
            max_rel = max_rel.max(rel);
            max_z = max_z.max(z);
            points.push((eta0, bvp, mc, se));
        }
        rows.push(ExitMomentRow { n, sigma, a, eta_star, points, max_rel_err: max_rel, max_z_score: max_z });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Clock;

    #[test]
    fn gap_counts_are_clock_invariant() {
        // Both detector banks see the same radius stream, so the number of
        // recorded gaps per level must agree exactly between clocks.
        let exp = SpikeExperiment {
            n: 1,
            levels: vec![6.0, 10.0, 18.0],
            n_traj: 4,
            t_per_traj: 5_000.0,
            seed: 9,
            ..SpikeExperiment::preset(1)
        };
        let (plain, slow) = run_spikes_dual(&exp).unwrap();
        assert_eq!(plain.clock, Clock::Plain);
        assert_eq!(slow.clock, Clock::TimeChanged);
        for (a, b) in plain.per_level.iter().zip(&slow.per_level) {
            assert_eq!(a.count, b.count, "counts differ at level {}", a.level);
            assert!(a.mean_gap != b.mean_gap);
        }
    }
}
