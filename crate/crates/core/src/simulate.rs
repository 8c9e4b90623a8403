//! Seeded integrators for the SDE, in plain Cartesian coordinates and in the
//! time-changed polar form, plus reproducible parallel ensembles.
//!
//! The Cartesian integrator is Euler-Maruyama with a drift-proportional
//! adaptive step: `dt = min(dt_base, ε/|drift|)`, so the deterministic
//! displacement per step never exceeds ε.  Spikes are therefore resolved to
//! a fixed spatial scale while the bulk runs at `dt_base`.  Taming or
//! clipping would distort exactly the large-|z| excursions the experiments
//! measure, so blow-ups are handled by events instead: a trajectory ends at
//! `r_cap` (`CapHit`) or when the state degenerates (`Blowup`).
//!
//! The time-changed integrator advances the `L = r^{-n}𝓛` dynamics
//!
//! ```text
//! dr = [r cos nθ + (Re(F e^{-iθ}) + σ²/2r) / r^n] dt + σ r^{-n/2} dW₁
//! dθ = [sin nθ + Im(F e^{-iθ}) / r^{n+1}] dt + σ r^{-(n+2)/2} dW₂
//! ```
//!
//! (the σ²/2r term is the Itô correction of the polar radius, so the polar
//! process is the exact time change of the Cartesian one) and accumulates
//! the physical clock `∫ r^n ds`.  Near the origin polar coordinates
//! degenerate; the integrator reflects at a floor `r_min` and records a
//! `FloorHit` event.
//!
//! Reproducibility contract: identical `(seed, config, spec, start)` give
//! bit-identical trajectories, and ensembles derive one RNG substream per
//! trajectory index, so summaries are independent of the worker count.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{polar_drift, PolarPoint, SystemSpec};
use crate::rng::substream;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Cartesian,
    TimeChangedPolar,
    DeterministicCartesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt_base: f64,
    /// Maximum deterministic displacement `|drift|·dt` per step.
    pub drift_cap_eps: f64,
    /// Explosion guard: the run ends with a CapHit event at this radius.
    pub r_cap: f64,
    pub t_max: f64,
    pub mode: Mode,
    /// Store every k-th step in the returned trajectory.
    pub thin_stride: usize,
    /// Reflecting floor for the polar integrator.
    pub r_min: f64,
    /// Polar mode: cap on the angular noise deviation per step.
    pub angle_noise_cap: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt_base: 1e-3,
            drift_cap_eps: 0.05,
            r_cap: 1e6,
            t_max: 100.0,
            mode: Mode::Cartesian,
            thin_stride: 100,
            r_min: 1e-3,
            angle_noise_cap: 0.1,
        }
    }
}

impl IntegratorConfig {
    fn validate(&self) -> Result<(), SimError> {
        let ok = self.dt_base > 0.0
            && self.drift_cap_eps > 0.0
            && self.r_cap.is_finite()
            && self.r_cap > 0.0
            && self.t_max > 0.0
            && self.thin_stride >= 1
            && self.r_min > 0.0
            && self.angle_noise_cap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::Config("non-finite or non-positive integrator parameter".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Event {
    /// The radius reached `r_cap`; the run stops here.
    CapHit(f64),
    /// The state degenerated (non-finite, or the step underflowed); the
    /// recorded time estimates the blow-up time.
    Blowup(f64),
    /// The polar integrator touched the reflecting floor (first time only).
    FloorHit(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum States {
    Cartesian(Vec<Complex64>),
    /// `(r, θ)` pairs plus the accumulated physical clock `∫ r^n ds`.
    Polar { coords: Vec<(f64, f64)>, physical_time: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: States,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn radii(&self) -> Vec<f64> {
        match &self.states {
            States::Cartesian(zs) => zs.iter().map(|z| z.norm()).collect(),
            States::Polar { coords, .. } => coords.iter().map(|&(r, _)| r).collect(),
        }
    }

    /// CSV export: `t,re,im` (Cartesian) or `t,r,theta,t_physical` (polar);
    /// events appended as `# event,<kind>,<t>` comment lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.states {
            States::Cartesian(zs) => {
                out.push_str("t,re,im\n");
                for (t, z) in self.times.iter().zip(zs) {
                    out.push_str(&format!("{},{},{}\n", t, z.re, z.im));
                }
            }
            States::Polar { coords, physical_time } => {
                out.push_str("t,r,theta,t_physical\n");
                for ((t, &(r, th)), tp) in self.times.iter().zip(coords).zip(physical_time) {
                    out.push_str(&format!("{},{},{},{}\n", t, r, th, tp));
                }
            }
        }
        for e in &self.events {
            let (kind, t) = match e {
                Event::CapHit(t) => ("cap_hit", t),
                Event::Blowup(t) => ("blowup", t),
                Event::FloorHit(t) => ("floor_hit", t),
            };
            out.push_str(&format!("# event,{kind},{t}\n"));
        }
        out
    }
}

/// One accepted step, as seen by a streaming observer.  Cartesian modes fill
/// `re`/`im` and leave `theta` NaN (call [`StepInfo::angle`] when the angle
/// is actually needed); the polar mode fills `theta` and leaves `re`/`im`
/// NaN.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// Integrator clock after the step.
    pub t: f64,
    pub dt: f64,
    /// Radius after the step.
    pub r: f64,
    /// Radius before the step (for crossing detection).
    pub r_prev: f64,
    /// Physical clock (equals `t` for the plain dynamics).
    pub t_physical: f64,
    pub re: f64,
    pub im: f64,
    pub theta: f64,
}

impl StepInfo {
    pub fn angle(&self) -> f64 {
        if self.theta.is_nan() {
            self.im.atan2(self.re)
        } else {
            self.theta
        }
    }
}

/// Integrate streaming every accepted step into `observe`; returning
/// `false` from the observer stops the run early.  The trajectory recording
/// of [`integrate`] is one such observer.
pub fn integrate_observed(
    spec: &SystemSpec,
    z0: Complex64,
    cfg: &IntegratorConfig,
    rng: &mut ChaCha8Rng,
    mut observe: impl FnMut(&StepInfo) -> bool,
) -> Result<Vec<Event>, SimError> {
    cfg.validate()?;
    if !(z0.re.is_finite() && z0.im.is_finite()) {
        return Err(SimError::Config("non-finite initial condition".into()));
    }
    match cfg.mode {
        Mode::Cartesian => cartesian_loop(spec, z0, cfg, rng, &mut observe, false),
        Mode::DeterministicCartesian => cartesian_loop(spec, z0, cfg, rng, &mut observe, true),
        Mode::TimeChangedPolar => {
            let p = crate::model::to_polar(z0);
            polar_loop(spec, p, cfg, rng, &mut observe)
        }
    }
}

fn cartesian_loop(
    spec: &SystemSpec,
    z0: Complex64,
    cfg: &IntegratorConfig,
    rng: &mut ChaCha8Rng,
    observe: &mut impl FnMut(&StepInfo) -> bool,
    deterministic: bool,
) -> Result<Vec<Event>, SimError> {
    let mut z = z0;
    let mut t = 0.0f64;
    let sigma = if deterministic { 0.0 } else { spec.sigma() };
    let mut events = Vec::new();
    let mut r_prev = z.norm();
    loop {
        if r_prev >= cfg.r_cap {
            events.push(Event::CapHit(t));
            break;
        }
        let drift = spec.drift(z);
        let dnorm = drift.norm();
        let mut dt = cfg.dt_base;
        if dnorm * dt > cfg.drift_cap_eps {
            dt = cfg.drift_cap_eps / dnorm;
        }
        let last = t + dt >= cfg.t_max;
        if last {
            dt = cfg.t_max - t;
            if !(dt > 0.0) {
                break;
            }
        }
        if dt <= 1e-300 || !dt.is_finite() {
            events.push(Event::Blowup(t));
            break;
        }
        if deterministic {
            // Classical RK4 on ż = drift(z).
            let k1 = drift;
            let k2 = spec.drift(z + 0.5 * dt * k1);
            let k3 = spec.drift(z + 0.5 * dt * k2);
            let k4 = spec.drift(z + dt * k3);
            z += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        } else {
            let mut dz = drift * dt;
            if sigma > 0.0 {
                let g1: f64 = rng.sample(StandardNormal);
                let g2: f64 = rng.sample(StandardNormal);
                let amp = sigma * dt.sqrt();
                dz += Complex64::new(amp * g1, amp * g2);
            }
            z += dz;
        }
        t = if last { cfg.t_max } else { t + dt };
        if !(z.re.is_finite() && z.im.is_finite()) {
            events.push(Event::Blowup(t));
            break;
        }
        let r = z.norm();
        let keep_going = observe(&StepInfo {
            t,
            dt,
            r,
            r_prev,
            t_physical: t,
            re: z.re,
            im: z.im,
            theta: f64::NAN,
        });
        r_prev = r;
        if last || !keep_going {
            break;
        }
    }
    Ok(events)
}

fn polar_loop(
    spec: &SystemSpec,
    p0: PolarPoint,
    cfg: &IntegratorConfig,
    rng: &mut ChaCha8Rng,
    observe: &mut impl FnMut(&StepInfo) -> bool,
) -> Result<Vec<Event>, SimError> {
    if p0.r <= 0.0 {
        return Err(SimError::Domain("polar integrator needs r0 > 0".into()));
    }
    let n = spec.n() as i32;
    let sigma = spec.sigma();
    let mut r = p0.r.max(cfg.r_min);
    let mut theta = p0.theta;
    let mut t = 0.0f64;
    let mut t_phys = 0.0f64;
    let mut events = Vec::new();
    let mut floor_recorded = false;
    loop {
        if r >= cfg.r_cap {
            events.push(Event::CapHit(t));
            break;
        }
        let rn = r.powi(n);
        let (big_dr, big_dth) = polar_drift(spec, PolarPoint::new(r, theta))
            .map_err(|e| SimError::Domain(e.to_string()))?;
        // L-drift, including the Itô correction of the radial coordinate.
        let dr_drift = big_dr / rn + 0.5 * sigma * sigma / (r * rn);
        let dth_drift = big_dth / rn;
        let b_r = sigma / r.powf(n as f64 / 2.0);
        let b_th = sigma / r.powf((n as f64 + 2.0) / 2.0);

        let disp = (dr_drift * dr_drift + r * r * dth_drift * dth_drift).sqrt();
        let mut dt = cfg.dt_base;
        if disp * dt > cfg.drift_cap_eps {
            dt = cfg.drift_cap_eps / disp;
        }
        if sigma > 0.0 {
            // Keep per-step noise kicks resolved: angular sd ≤ the cap and
            // radial sd ≤ a quarter of the current radius.
            let dt_th = (cfg.angle_noise_cap / b_th) * (cfg.angle_noise_cap / b_th);
            let dt_r = (0.25 * r / b_r) * (0.25 * r / b_r);
            dt = dt.min(dt_th).min(dt_r);
        }
        let last = t + dt >= cfg.t_max;
        if last {
            dt = cfg.t_max - t;
            if !(dt > 0.0) {
                break;
            }
        }
        if dt <= 1e-300 || !dt.is_finite() {
            events.push(Event::Blowup(t));
            break;
        }
        let r_prev = r;
        let sq = dt.sqrt();
        let mut dr = dr_drift * dt;
        let mut dth = dth_drift * dt;
        if sigma > 0.0 {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            dr += b_r * sq * g1;
            dth += b_th * sq * g2;
        }
        r += dr;
        theta += dth;
        if theta > std::f64::consts::PI {
            theta -= 2.0 * std::f64::consts::PI;
        } else if theta <= -std::f64::consts::PI {
            theta += 2.0 * std::f64::consts::PI;
        }
        if r < cfg.r_min {
            r = 2.0 * cfg.r_min - r;
            if !floor_recorded {
                events.push(Event::FloorHit(t));
                floor_recorded = true;
            }
        }
        t = if last { cfg.t_max } else { t + dt };
        t_phys += r_prev.powi(n) * dt;
        if !r.is_finite() || !theta.is_finite() {
            events.push(Event::Blowup(t));
            break;
        }
        let keep_going = observe(&StepInfo {
            t,
            dt,
            r,
            r_prev,
            t_physical: t_phys,
            re: f64::NAN,
            im: f64::NAN,
            theta,
        });
        if last || !keep_going {
            break;
        }
    }
    Ok(events)
}

/// Integrate and record a thinned trajectory.
pub fn integrate(
    spec: &SystemSpec,
    z0: Complex64,
    cfg: &IntegratorConfig,
    seed: u64,
) -> Result<Trajectory, SimError> {
    let mut rng = substream(seed, 0);
    integrate_with_rng(spec, z0, cfg, &mut rng)
}

pub fn integrate_with_rng(
    spec: &SystemSpec,
    z0: Complex64,
    cfg: &IntegratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, SimError> {
    let polar = cfg.mode == Mode::TimeChangedPolar;
    let mut times = Vec::new();
    let mut cart = Vec::new();
    let mut coords = Vec::new();
    let mut phys = Vec::new();
    let mut step_idx = 0usize;
    let events = integrate_observed(spec, z0, cfg, rng, |info| {
        step_idx += 1;
        if step_idx % cfg.thin_stride == 0 {
            times.push(info.t);
            if polar {
                coords.push((info.r, info.theta));
                phys.push(info.t_physical);
            } else {
                cart.push(Complex64::new(info.re, info.im));
            }
        }
        true
    })?;
    let states = if polar {
        States::Polar { coords, physical_time: phys }
    } else {
        States::Cartesian(cart)
    };
    Ok(Trajectory { times, states, events })
}

/// Integrate the time-changed polar dynamics from a polar start.
pub fn integrate_timechanged(
    spec: &SystemSpec,
    p0: PolarPoint,
    cfg: &IntegratorConfig,
    seed: u64,
) -> Result<Trajectory, SimError> {
    let mut cfg = *cfg;
    cfg.mode = Mode::TimeChangedPolar;
    let mut rng = substream(seed, 0);
    integrate_with_rng(spec, crate::model::to_cartesian(p0), &cfg, &mut rng)
}

/// Run `n_traj` independent jobs on RNG substreams derived from
/// `(master_seed, index)` and return the results in index order.  The output
/// is byte-identical for any rayon worker count.
pub fn run_ensemble<R, F>(n_traj: usize, master_seed: u64, job: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, ChaCha8Rng) -> R + Sync,
{
    (0..n_traj)
        .into_par_iter()
        .map(|i| job(i, substream(master_seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{blowup_time_monomial, orbit_k};
    use std::f64::consts::PI;

    #[test]
    fn deterministic_blowup_matches_closed_form() {
        for (n, r0) in [(1u32, 1.0f64), (2, 1.0), (1, 2.0)] {
            let spec = SystemSpec::monomial(n, 0.0);
            let cfg = IntegratorConfig {
                mode: Mode::DeterministicCartesian,
                r_cap: 1e6,
                t_max: 10.0,
                dt_base: 1e-4,
                drift_cap_eps: 0.01,
                ..Default::default()
            };
            let traj = integrate(&spec, Complex64::new(r0, 0.0), &cfg, 0).unwrap();
            let expect = blowup_time_monomial(r0, n);
            match traj.events.as_slice() {
                [Event::CapHit(t)] => {
                    assert!(
                        (t - expect).abs() / expect < 0.02,
                        "n={n}, r0={r0}: cap at {t}, closed form {expect}"
                    );
                }
                other => panic!("expected a CapHit, got {other:?}"),
            }
        }
    }

    #[test]
    fn decaying_ray_is_monotone() {
        let n = 2u32;
        let spec = SystemSpec::monomial(n, 0.0);
        let cfg = IntegratorConfig {
            mode: Mode::DeterministicCartesian,
            t_max: 5.0,
            thin_stride: 10,
            ..Default::default()
        };
        let z0 = Complex64::from_polar(1.5, PI / n as f64);
        let traj = integrate(&spec, z0, &cfg, 0).unwrap();
        let radii = traj.radii();
        assert!(radii.len() > 100);
        for w in radii.windows(2) {
            assert!(w[1] < w[0] + 1e-12, "radius not decreasing: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn orbit_constant_is_preserved_without_noise() {
        let n = 2u32;
        let spec = SystemSpec::monomial(n, 0.0);
        let cfg = IntegratorConfig {
            mode: Mode::DeterministicCartesian,
            t_max: 0.12,
            dt_base: 1e-4,
            drift_cap_eps: 0.01,
            thin_stride: 10,
            ..Default::default()
        };
        let start = PolarPoint::new(1.0, PI / (4.0 * n as f64));
        let k0 = orbit_k(start, n).unwrap();
        let traj = integrate(&spec, crate::model::to_cartesian(start), &cfg, 0).unwrap();
        let mut checked = 0;
        if let States::Cartesian(zs) = &traj.states {
            for z in zs {
                let k = orbit_k(crate::model::to_polar(*z), n).unwrap();
                assert!((k - k0).abs() / k0 < 1e-3, "K drifted: {k} vs {k0}");
                checked += 1;
            }
        }
        assert!(checked >= 10);
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let spec = SystemSpec::monomial(1, 1.0);
        let cfg = IntegratorConfig { t_max: 20.0, thin_stride: 7, ..Default::default() };
        let a = integrate(&spec, Complex64::new(0.3, -0.1), &cfg, 99).unwrap();
        let b = integrate(&spec, Complex64::new(0.3, -0.1), &cfg, 99).unwrap();
        assert_eq!(a, b);
        let c = integrate(&spec, Complex64::new(0.3, -0.1), &cfg, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn drift_displacement_cap_holds_each_step() {
        let spec = SystemSpec::monomial(2, 1.0);
        let cfg = IntegratorConfig { t_max: 30.0, ..Default::default() };
        let mut rng = substream(5, 0);
        let mut worst = 0.0f64;
        integrate_observed(&spec, Complex64::new(1.0, 0.0), &cfg, &mut rng, |info| {
            // For the monomial drift |drift| = r^{n+1}, so the pre-step
            // radius reconstructs the step's drift magnitude.
            let drift = info.r_prev.powi(3);
            worst = worst.max(drift * info.dt);
            true
        })
        .unwrap();
        assert!(worst <= cfg.drift_cap_eps * (1.0 + 1e-9), "cap violated: {worst}");
    }

    #[test]
    fn ensemble_is_invariant_under_worker_count() {
        let spec = SystemSpec::monomial(1, 1.0);
        let cfg = IntegratorConfig { t_max: 5.0, thin_stride: 50, ..Default::default() };
        let job = |_: usize, mut rng: ChaCha8Rng| {
            integrate_with_rng(&spec, Complex64::new(0.0, 0.0), &cfg, &mut rng)
                .unwrap()
                .radii()
        };
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = single.install(|| run_ensemble(16, 7, job));
        let b = many.install(|| run_ensemble(16, 7, job));
        assert_eq!(a, b);
        // n_traj = 1 equals a direct call with the derived substream.
        let direct = job(0, substream(7, 0));
        assert_eq!(run_ensemble(1, 7, job)[0], direct);
    }

    #[test]
    fn timechanged_radial_growth_is_exponential_without_noise() {
        // On θ = 0, the slow dynamics is ṙ = r exactly (σ = 0, F = 0).
        let spec = SystemSpec::monomial(3, 0.0);
        let cfg = IntegratorConfig {
            mode: Mode::TimeChangedPolar,
            t_max: 2.0,
            dt_base: 1e-4,
            drift_cap_eps: 1e-3,
            r_cap: 1e9,
            thin_stride: 1,
            ..Default::default()
        };
        let traj = integrate_timechanged(&spec, PolarPoint::new(3.0, 0.0), &cfg, 0).unwrap();
        if let States::Polar { coords, .. } = &traj.states {
            let (t_end, (r_end, th_end)) = (*traj.times.last().unwrap(), *coords.last().unwrap());
            assert!(th_end.abs() < 1e-12);
            let expect = 3.0 * t_end.exp();
            assert!(
                (r_end - expect).abs() / expect < 1e-3,
                "r({t_end}) = {r_end}, want {expect}"
            );
        } else {
            panic!("polar states expected");
        }
    }

    #[test]
    fn physical_time_monotone_and_fast_above_unit_radius() {
        let spec = SystemSpec::monomial(1, 1.0);
        let cfg = IntegratorConfig {
            mode: Mode::TimeChangedPolar,
            t_max: 50.0,
            thin_stride: 1,
            // Keep the test away from the near-origin regime where the
            // physical-clock increments underflow against the running sum.
            r_min: 0.3,
            ..Default::default()
        };
        let traj = integrate_timechanged(&spec, PolarPoint::new(2.0, 0.3), &cfg, 11).unwrap();
        if let States::Polar { coords, physical_time } = &traj.states {
            for i in 1..physical_time.len() {
                let dphys = physical_time[i] - physical_time[i - 1];
                let dt = traj.times[i] - traj.times[i - 1];
                assert!(dphys > 0.0);
                if coords[i - 1].0 > 1.0 {
                    assert!(dphys >= dt * (1.0 - 1e-9), "physical clock slower than r^n > 1");
                }
            }
        } else {
            panic!("polar states expected");
        }
    }

    #[test]
    fn non_finite_start_is_a_config_error() {
        let spec = SystemSpec::monomial(1, 1.0);
        let cfg = IntegratorConfig::default();
        assert!(matches!(
            integrate(&spec, Complex64::new(f64::NAN, 0.0), &cfg, 0),
            Err(SimError::Config(_))
        ));
        let bad = IntegratorConfig { dt_base: -1.0, ..Default::default() };
        assert!(matches!(
            integrate(&spec, Complex64::new(0.0, 0.0), &bad, 0),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn runs_end_exactly_at_t_max() {
        let spec = SystemSpec::monomial(1, 1.0);
        let cfg = IntegratorConfig { t_max: 3.0, thin_stride: 1, ..Default::default() };
        let traj = integrate(&spec, Complex64::new(0.1, 0.0), &cfg, 4).unwrap();
        assert_eq!(*traj.times.last().unwrap(), 3.0);
        assert!(traj.events.is_empty());
    }

    #[test]
    fn csv_layout() {
        let spec = SystemSpec::monomial(1, 1.0);
        let cfg = IntegratorConfig { t_max: 0.5, thin_stride: 100, ..Default::default() };
        let traj = integrate(&spec, Complex64::new(1.0, 1.0), &cfg, 3).unwrap();
        let csv = traj.to_csv();
        assert!(csv.starts_with("t,re,im\n"));
        assert_eq!(csv.lines().count(), 1 + traj.times.len());
    }
}
