//! Exit moments of the unstable Ornstein-Uhlenbeck process
//!
//! ```text
//! dη = ((3/2)n + 1) η dt + σ dW,    τ_c = inf{ t : η_t ∉ [-η*+c, η*+c] }.
//! ```
//!
//! The exit-moment function `G_{a,c}(η) = E_η e^{a τ_c}` is, for
//! `0 < a < (3/2)n + 1`, the unique bounded solution of the two-point
//! boundary-value problem
//!
//! ```text
//! σ²/2 G'' + ((3/2)n + 1) η G' + a G = 0,    G(-η*+c) = G(η*+c) = 1,
//! ```
//!
//! which this module solves by a second-order finite-difference scheme
//! ([`solve_bvp`]).  A direct Monte-Carlo estimate ([`mc_exit_moment`]) using
//! the exact OU transition serves as an independent oracle, the substitution
//! `G = e^{-βη²/4} H(√β η)`, `β = (3n+2)/σ²`, turns the ODE into Weber's
//! equation and yields a residual check ([`weber_residual`]), and
//! [`smallest_eigenvalue`] computes the principal eigenvalue λ₁ of the killed
//! generator, which controls the exponential tail of τ and tends to
//! `(3n+2)/2` as `η* → ∞`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::substream;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ExitError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("solve error: {0}")]
    Solve(String),
    #[error("budget error: {0}")]
    Budget(String),
    #[error("convergence error: {0}")]
    Convergence(String),
    #[error("table range error: {0}")]
    OutOfRange(String),
}

/// The drift rate and noise of the rescaled-angle OU process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuSpec {
    /// `(3/2) n + 1`.
    pub rate: f64,
    pub sigma: f64,
}

impl OuSpec {
    pub fn for_system(n: u32, sigma: f64) -> Self {
        Self { rate: 1.5 * n as f64 + 1.0, sigma }
    }
}

/// Grid solution of `G_{a,c}` with first derivative on `[-η*+c, η*+c]`.
#[derive(Debug, Clone)]
pub struct ExitMomentTable {
    pub a: f64,
    pub c: f64,
    pub eta_star: f64,
    pub sigma: f64,
    pub n: u32,
    pub grid_size: usize,
    /// Uniform grid nodes, `grid_size + 1` of them.
    pub eta: Vec<f64>,
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
    /// Relative sup-norm change when the solve is repeated at twice the
    /// resolution; a convergence certificate for the stored values.
    pub richardson_rel_change: f64,
}

fn check_a(a: f64, n: u32) -> Result<(), ExitError> {
    let cap = 1.5 * n as f64 + 1.0;
    if !(a > 0.0 && a < cap) {
        return Err(ExitError::Domain(format!(
            "a = {a} outside (0, {cap}); E e^{{aτ}} blows up at the threshold"
        )));
    }
    Ok(())
}

/// Thomas algorithm for a general tridiagonal system.
fn solve_tridiagonal(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, ExitError> {
    let m = diag.len();
    debug_assert!(sub.len() == m - 1 && sup.len() == m - 1 && rhs.len() == m);
    let mut c_prime = vec![0.0; m];
    let mut d_prime = vec![0.0; m];
    let mut denom = diag[0];
    if denom.abs() < 1e-300 || !denom.is_finite() {
        return Err(ExitError::Solve("singular tridiagonal system".into()));
    }
    c_prime[0] = sup.first().copied().unwrap_or(0.0) / denom;
    d_prime[0] = rhs[0] / denom;
    for i in 1..m {
        denom = diag[i] - sub[i - 1] * c_prime[i - 1];
        if denom.abs() < 1e-300 || !denom.is_finite() {
            return Err(ExitError::Solve(format!("singular pivot at row {i}")));
        }
        if i < m - 1 {
            c_prime[i] = sup[i] / denom;
        }
        d_prime[i] = (rhs[i] - sub[i - 1] * d_prime[i - 1]) / denom;
    }
    let mut x = vec![0.0; m];
    x[m - 1] = d_prime[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = d_prime[i] - c_prime[i] * x[i + 1];
    }
    Ok(x)
}

fn bvp_values(
    a: f64,
    c: f64,
    eta_star: f64,
    rate: f64,
    sigma: f64,
    grid_size: usize,
) -> Result<(Vec<f64>, Vec<f64>), ExitError> {
    let m = grid_size - 1; // interior unknowns
    let lo = -eta_star + c;
    let h = 2.0 * eta_star / grid_size as f64;
    let s2h2 = 0.5 * sigma * sigma / (h * h);
    let mut sub = vec![0.0; m - 1];
    let mut diag = vec![0.0; m];
    let mut sup = vec![0.0; m - 1];
    let mut rhs = vec![0.0; m];
    for i in 0..m {
        let eta_i = lo + (i + 1) as f64 * h;
        let adv = rate * eta_i / (2.0 * h);
        let lower = s2h2 - adv;
        let upper = s2h2 + adv;
        diag[i] = -2.0 * s2h2 + a;
        if i > 0 {
            sub[i - 1] = lower;
        } else {
            rhs[i] -= lower; // G = 1 at the left boundary
        }
        if i < m - 1 {
            sup[i] = upper;
        } else {
            rhs[i] -= upper; // G = 1 at the right boundary
        }
    }
    let interior = solve_tridiagonal(&sub, &diag, &sup, &rhs)?;
    let mut values = Vec::with_capacity(grid_size + 1);
    values.push(1.0);
    values.extend_from_slice(&interior);
    values.push(1.0);
    let eta: Vec<f64> = (0..=grid_size).map(|i| lo + i as f64 * h).collect();
    Ok((eta, values))
}

/// Fourth-order first derivative of grid values, one-sided at the ends.
fn grid_derivative(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut d = vec![0.0; n];
    let v = values;
    for i in 0..n {
        d[i] = if i >= 2 && i + 2 < n {
            (v[i - 2] - 8.0 * v[i - 1] + 8.0 * v[i + 1] - v[i + 2]) / (12.0 * h)
        } else if i == 0 {
            (-25.0 * v[0] + 48.0 * v[1] - 36.0 * v[2] + 16.0 * v[3] - 3.0 * v[4]) / (12.0 * h)
        } else if i == 1 {
            (-3.0 * v[0] - 10.0 * v[1] + 18.0 * v[2] - 6.0 * v[3] + v[4]) / (12.0 * h)
        } else if i + 2 == n {
            (3.0 * v[n - 1] + 10.0 * v[n - 2] - 18.0 * v[n - 3] + 6.0 * v[n - 4] - v[n - 5])
                / (12.0 * h)
        } else {
            (25.0 * v[n - 1] - 48.0 * v[n - 2] + 36.0 * v[n - 3] - 16.0 * v[n - 4]
                + 3.0 * v[n - 5])
                / (12.0 * h)
        };
    }
    d
}

/// Solve the boundary-value problem for `G_{a,c}` on a uniform grid with
/// `grid_size` intervals.
pub fn solve_bvp(
    a: f64,
    c: f64,
    eta_star: f64,
    sigma: f64,
    n: u32,
    grid_size: usize,
) -> Result<ExitMomentTable, ExitError> {
    check_a(a, n)?;
    if !(eta_star > c.abs()) {
        return Err(ExitError::Domain("need eta_star > |c|".into()));
    }
    if grid_size < 64 {
        return Err(ExitError::Domain("grid_size must be at least 64".into()));
    }
    if !(sigma > 0.0) {
        return Err(ExitError::Domain("sigma must be positive".into()));
    }
    let rate = 1.5 * n as f64 + 1.0;
    let (eta, values) = bvp_values(a, c, eta_star, rate, sigma, grid_size)?;
    let h = 2.0 * eta_star / grid_size as f64;
    let derivs = grid_derivative(&values, h);

    // Convergence certificate: re-solve at twice the resolution and compare
    // at the shared nodes.
    let (_, fine) = bvp_values(a, c, eta_star, rate, sigma, 2 * grid_size)?;
    let mut rel = 0.0f64;
    for i in 0..=grid_size {
        let d = (values[i] - fine[2 * i]).abs() / fine[2 * i].abs().max(1.0);
        rel = rel.max(d);
    }

    Ok(ExitMomentTable {
        a,
        c,
        eta_star,
        sigma,
        n,
        grid_size,
        eta,
        values,
        derivs,
        richardson_rel_change: rel,
    })
}

impl ExitMomentTable {
    fn h(&self) -> f64 {
        2.0 * self.eta_star / self.grid_size as f64
    }

    /// `G''` from the ODE itself.
    fn second_from_ode(&self, eta: f64, g: f64, gp: f64) -> f64 {
        let rate = 1.5 * self.n as f64 + 1.0;
        -2.0 / (self.sigma * self.sigma) * (rate * eta * gp + self.a * g)
    }

    fn locate(&self, eta: f64) -> Result<(usize, f64), ExitError> {
        let lo = -self.eta_star + self.c;
        let hi = self.eta_star + self.c;
        let tol = 1e-9 * self.eta_star;
        if eta < lo - tol || eta > hi + tol {
            return Err(ExitError::OutOfRange(format!(
                "eta = {eta} outside table range [{lo}, {hi}]"
            )));
        }
        let h = self.h();
        let x = ((eta - lo) / h).clamp(0.0, (self.grid_size as f64) - 1e-12);
        let i = (x.floor() as usize).min(self.grid_size - 1);
        Ok((i, x - i as f64))
    }

    /// Cubic-Hermite interpolation of `G` (uses the stored derivatives).
    pub fn g(&self, eta: f64) -> Result<f64, ExitError> {
        let (i, t) = self.locate(eta)?;
        let h = self.h();
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        let (d0, d1) = (self.derivs[i], self.derivs[i + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        Ok((2.0 * t3 - 3.0 * t2 + 1.0) * v0
            + (t3 - 2.0 * t2 + t) * h * d0
            + (-2.0 * t3 + 3.0 * t2) * v1
            + (t3 - t2) * h * d1)
    }

    /// Cubic-Hermite interpolation of `G'` (its derivative comes from the
    /// ODE identity at the nodes).
    pub fn g_prime(&self, eta: f64) -> Result<f64, ExitError> {
        let (i, t) = self.locate(eta)?;
        let h = self.h();
        let (v0, v1) = (self.derivs[i], self.derivs[i + 1]);
        let d0 = self.second_from_ode(self.eta[i], self.values[i], self.derivs[i]);
        let d1 = self.second_from_ode(self.eta[i + 1], self.values[i + 1], self.derivs[i + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        Ok((2.0 * t3 - 3.0 * t2 + 1.0) * v0
            + (t3 - 2.0 * t2 + t) * h * d0
            + (-2.0 * t3 + 3.0 * t2) * v1
            + (t3 - t2) * h * d1)
    }

    /// `G''` at an arbitrary point via the ODE identity.
    pub fn g_second(&self, eta: f64) -> Result<f64, ExitError> {
        let g = self.g(eta)?;
        let gp = self.g_prime(eta)?;
        Ok(self.second_from_ode(eta, g, gp))
    }

    /// CSV export: a comment header with the parameters, then
    /// `eta,G,Gprime` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# a={},c={},eta_star={},sigma={},n={},grid_size={}\n",
            self.a, self.c, self.eta_star, self.sigma, self.n, self.grid_size
        ));
        out.push_str("eta,G,Gprime\n");
        for i in 0..self.eta.len() {
            out.push_str(&format!("{},{},{}\n", self.eta[i], self.values[i], self.derivs[i]));
        }
        out
    }
}

/// Monte-Carlo estimate of `E_{η₀} e^{a τ_c}` with exact Gaussian stepping of
/// the OU transition; the crossing time inside the final step is refined by
/// linear interpolation.  Returns `(estimate, standard_error)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_exit_moment(
    a: f64,
    c: f64,
    eta0: f64,
    spec: &OuSpec,
    eta_star: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<(f64, f64), ExitError> {
    if !(a > 0.0 && a < spec.rate) {
        return Err(ExitError::Domain(format!(
            "a = {a} outside (0, {}); E e^{{aτ}} blows up at the threshold",
            spec.rate
        )));
    }
    if !(eta_star > c.abs()) {
        return Err(ExitError::Domain("need eta_star > |c|".into()));
    }
    let lo = -eta_star + c;
    let hi = eta_star + c;
    if eta0 <= lo || eta0 >= hi {
        // Start on or beyond the boundary: τ = 0 exactly.
        return Ok((1.0, 0.0));
    }
    // Exit times have exponential tail at rate ≥ λ₁ ≈ rate, so this cap
    // truncates a vanishing fraction of the mass.
    let t_cap = 60.0 / spec.rate;
    // Monitoring levels: the base step, refined 16× and 256× as the path
    // nears a barrier.  Crossings between monitoring times are what bias
    // the estimate (missed excursions lengthen τ), so the resolution must
    // shrink exactly where crossings happen.
    let level = |dt_l: f64| {
        let growth = (spec.rate * dt_l).exp();
        let sd = spec.sigma * ((growth * growth - 1.0) / (2.0 * spec.rate)).sqrt();
        (dt_l, growth, sd)
    };
    let levels = [level(dt), level(dt / 16.0), level(dt / 256.0)];

    let results: Vec<Option<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = substream(seed, path as u64);
            let mut eta = eta0;
            let mut t = 0.0f64;
            while t < t_cap {
                let dist = (hi - eta).min(eta - lo);
                let (dt_l, growth, sd) = if dist > 6.0 * levels[0].2 {
                    levels[0]
                } else if dist > 6.0 * levels[1].2 {
                    levels[1]
                } else {
                    levels[2]
                };
                let next = eta * growth + sd * rng.sample::<f64, _>(StandardNormal);
                if next >= hi || next <= lo {
                    let barrier = if next >= hi { hi } else { lo };
                    let frac = ((barrier - eta) / (next - eta)).clamp(0.0, 1.0);
                    return Some(t + frac * dt_l);
                }
                eta = next;
                t += dt_l;
            }
            None
        })
        .collect();

    let exited = results.iter().flatten().count();
    if exited < 100 {
        return Err(ExitError::Budget(format!(
            "only {exited} of {n_paths} paths exited within the step cap"
        )));
    }
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for tau in results.iter().flatten() {
        let v = (a * tau).exp();
        sum += v;
        sumsq += v * v;
    }
    let n_f = exited as f64;
    let mean = sum / n_f;
    let var = (sumsq / n_f - mean * mean).max(0.0);
    Ok((mean, (var / n_f).sqrt()))
}

/// Transform a table back to Weber form `H(v) = G(η) e^{βη²/4}`, `v = √β η`,
/// and return the sup over the central half of the interval of the
/// term-relative residual of `H'' = (v²/4 + 1/2 - 2a/(σ²β)) H` under the
/// second-order stencil.
pub fn weber_residual(table: &ExitMomentTable) -> f64 {
    let beta = (3.0 * table.n as f64 + 2.0) / (table.sigma * table.sigma);
    let kappa = 2.0 * table.a / (table.sigma * table.sigma * beta);
    let hv = table.h() * beta.sqrt();
    let m = table.eta.len();
    let h_vals: Vec<f64> = (0..m)
        .map(|i| {
            let eta = table.eta[i];
            table.values[i] * (beta * eta * eta / 4.0).exp()
        })
        .collect();
    let mut sup = 0.0f64;
    for i in 1..m - 1 {
        // Central half of the interval, away from the boundary layers.
        if (table.eta[i] - table.c).abs() > 0.5 * table.eta_star {
            continue;
        }
        let v = beta.sqrt() * table.eta[i];
        let w = v * v / 4.0 + 0.5 - kappa;
        let second = (h_vals[i - 1] - 2.0 * h_vals[i] + h_vals[i + 1]) / (hv * hv);
        let resid = (second - w * h_vals[i]).abs() / (1.0 + second.abs() + (w * h_vals[i]).abs());
        sup = sup.max(resid);
    }
    sup
}

/// Smallest eigenvalue of the killed generator
/// `(𝒬 f)(η) = -σ²/2 f'' + ((3n+2)/2)(η f)'` on `[-η*, η*]` with zero
/// boundary conditions, by inverse power iteration on the second-order
/// discretization.  Tends to `(3n+2)/2` as `η* → ∞`.
pub fn smallest_eigenvalue(
    eta_star: f64,
    sigma: f64,
    n: u32,
    grid_size: usize,
) -> Result<f64, ExitError> {
    if grid_size < 128 {
        return Err(ExitError::Domain("grid_size must be at least 128".into()));
    }
    if !(eta_star > 0.0 && sigma > 0.0) {
        return Err(ExitError::Domain("eta_star and sigma must be positive".into()));
    }
    let rate = (3.0 * n as f64 + 2.0) / 2.0;
    let m = grid_size - 1;
    let h = 2.0 * eta_star / grid_size as f64;
    let s2h2 = 0.5 * sigma * sigma / (h * h);
    let eta_at = |i: usize| -eta_star + (i + 1) as f64 * h;

    // Row i: -σ²/2 f'' + rate f + rate η f'.
    let mut sub = vec![0.0; m - 1];
    let mut diag = vec![0.0; m];
    let mut sup = vec![0.0; m - 1];
    for i in 0..m {
        let adv = rate * eta_at(i) / (2.0 * h);
        diag[i] = 2.0 * s2h2 + rate;
        if i > 0 {
            sub[i - 1] = -s2h2 - rate * eta_at(i) / (2.0 * h);
        }
        if i < m - 1 {
            sup[i] = -s2h2 + adv;
        }
    }

    let apply = |x: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; m];
        for i in 0..m {
            let mut acc = diag[i] * x[i];
            if i > 0 {
                acc += sub[i - 1] * x[i - 1];
            }
            if i < m - 1 {
                acc += sup[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    };

    // Start from the Gaussian bump the quasi-stationary density resembles.
    let mut x: Vec<f64> = (0..m)
        .map(|i| {
            let e = eta_at(i);
            (-rate * e * e / (sigma * sigma)).exp()
        })
        .collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= norm);

    let mut lambda = f64::NAN;
    for _ in 0..200 {
        let y = solve_tridiagonal(&sub, &diag, &sup, &x)?;
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(ExitError::Convergence("inverse iteration degenerated".into()));
        }
        let ynorm: Vec<f64> = y.iter().map(|v| v / norm).collect();
        let qy = apply(&ynorm);
        let rayleigh =
            ynorm.iter().zip(&qy).map(|(u, v)| u * v).sum::<f64>();
        if (rayleigh - lambda).abs() <= 1e-12 * rayleigh.abs().max(1.0) {
            return Ok(rayleigh);
        }
        lambda = rayleigh;
        x = ynorm;
    }
    Err(ExitError::Convergence("inverse power iteration did not settle".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn vanishing_exponent_gives_unit_solution() {
        let t = solve_bvp(1e-12, 0.0, 6.0, 1.0, 1, 512).unwrap();
        let worst = t.values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-8, "sup|G-1| = {worst}");
    }

    #[test]
    fn centered_case_is_symmetric() {
        let t = solve_bvp(1.0, 0.0, 8.0, 1.0, 1, 8192).unwrap();
        let m = t.values.len();
        let mut worst = 0.0f64;
        for i in 0..m {
            worst = worst.max((t.values[i] - t.values[m - 1 - i]).abs());
        }
        assert!(worst < 1e-10, "asymmetry {worst}");
        assert!(t.richardson_rel_change < 1e-6);
        // G ≥ 1 and exactly 1 at the endpoints.
        assert_eq!(t.values[0], 1.0);
        assert_eq!(t.values[m - 1], 1.0);
        assert!(t.values.iter().all(|&v| v >= 1.0 - 1e-12));
    }

    #[test]
    fn boundary_derivative_matches_asymptotics() {
        // G'(±η*) → ∓(2a/(3n+2))/η* as η* → ∞.
        let n = 1;
        let a = 1.0;
        let predict = |eta_star: f64| -(2.0 * a / (3.0 * n as f64 + 2.0)) / eta_star;
        let rel_err = |eta_star: f64, grid: usize| {
            let t = solve_bvp(a, 0.0, eta_star, 1.0, n, grid).unwrap();
            let g_end = *t.derivs.last().unwrap();
            (g_end - predict(eta_star)).abs() / predict(eta_star).abs()
        };
        let e50 = rel_err(50.0, 16384);
        let e200 = rel_err(200.0, 65536);
        assert!(e50 < 0.10, "relative error at eta*=50: {e50}");
        assert!(e200 < 0.03, "relative error at eta*=200: {e200}");
        assert!(e200 < e50);
    }

    #[test]
    fn exponent_blowup_direction() {
        let cap = 2.5; // n = 1
        let sup = |a: f64| {
            let t = solve_bvp(a, 0.0, 8.0, 1.0, 1, 2048).unwrap();
            t.values.iter().copied().fold(0.0, f64::max)
        };
        assert!(sup(0.99 * cap) > sup(0.9 * cap));
    }

    #[test]
    fn mc_agrees_with_bvp_at_interior_points() {
        // dt must keep the discrete-monitoring bias (O(√dt) missed
        // crossings) well under the Monte-Carlo standard error.
        let n = 1;
        let sigma = 1.0;
        let a = 1.0;
        let eta_star = 4.0;
        let table = solve_bvp(a, 0.0, eta_star, sigma, n, 8192).unwrap();
        let spec = OuSpec::for_system(n, sigma);
        for i in 0..5 {
            let eta0 = -3.0 + 1.5 * i as f64;
            let (est, se) =
                mc_exit_moment(a, 0.0, eta0, &spec, eta_star, 100_000, 2.5e-4, 777).unwrap();
            let exact = table.g(eta0).unwrap();
            let diff = (est - exact).abs();
            assert!(
                diff < 3.0 * se.max(1e-12) && diff / exact < 0.01,
                "eta0={eta0}: mc={est}±{se}, bvp={exact}, z={}",
                diff / se
            );
        }
    }

    #[test]
    fn mc_boundary_start_and_monotonicity() {
        let spec = OuSpec::for_system(1, 1.0);
        let (est, se) = mc_exit_moment(1.0, 0.0, 5.0, &spec, 5.0, 1000, 1e-3, 1).unwrap();
        assert_eq!((est, se), (1.0, 0.0));
        // Same seed ⇒ same exit times ⇒ pathwise monotone in a.
        let (lo, _) = mc_exit_moment(0.5, 0.0, 0.5, &spec, 5.0, 2000, 1e-3, 3).unwrap();
        let (hi, _) = mc_exit_moment(1.0, 0.0, 0.5, &spec, 5.0, 2000, 1e-3, 3).unwrap();
        assert!(lo <= hi);
    }

    #[test]
    fn weber_beta_and_residual_scaling() {
        // β = (3n+2)/σ²: n=1, σ=1 → 5.
        assert_relative_eq!((3.0 * 1.0 + 2.0) / 1.0, 5.0);
        let coarse = weber_residual(&solve_bvp(1.0, 0.0, 10.0, 1.0, 1, 2048).unwrap());
        let mid = weber_residual(&solve_bvp(1.0, 0.0, 10.0, 1.0, 1, 4096).unwrap());
        let fine = weber_residual(&solve_bvp(1.0, 0.0, 10.0, 1.0, 1, 8192).unwrap());
        // Truncation estimate for the term-relative residual at grid 4096:
        // Δv²·W_edge/12 with Δv = √5·(20/4096), W_edge ≈ β η*²/16 ≈ 31.4,
        // giving ≈ 3e-4; frozen with a ×1.7 margin.
        assert!(mid < 5e-4, "residual {mid}");
        let ratio = coarse / mid;
        assert!((2.8..5.6).contains(&ratio), "halving ratio {ratio}");
        let ratio = mid / fine;
        assert!((2.8..5.6).contains(&ratio), "halving ratio {ratio}");
    }

    #[test]
    fn smallest_eigenvalue_limits() {
        for n in [1u32, 2] {
            let limit = (3.0 * n as f64 + 2.0) / 2.0;
            let l = smallest_eigenvalue(50.0, 1.0, n, 4096).unwrap();
            assert!(l > 0.0);
            assert!(
                (l - limit).abs() / limit < 0.05,
                "n={n}: lambda1 = {l}, limit = {limit}"
            );
        }
        // Decreasing toward the limit as the domain grows (the truncation
        // correction is only visible below η* ≈ 3; beyond that the
        // eigenvalue sits at the limit to machine precision).
        let at = |eta: f64| {
            let grid = ((2.0 * eta / 0.002) as usize).next_power_of_two();
            smallest_eigenvalue(eta, 1.0, 1, grid).unwrap()
        };
        let (l_small, l_mid, l_large) = (at(1.25), at(1.75), at(2.5));
        assert!(l_small > l_mid && l_mid > l_large && l_large > 2.5 - 1e-9);
        assert!((l_large - 2.5).abs() < (l_mid - 2.5).abs());
    }

    #[test]
    fn domain_errors() {
        assert!(solve_bvp(2.5, 0.0, 5.0, 1.0, 1, 512).is_err()); // a at the cap
        assert!(solve_bvp(-0.1, 0.0, 5.0, 1.0, 1, 512).is_err());
        assert!(solve_bvp(1.0, 6.0, 5.0, 1.0, 1, 512).is_err()); // |c| ≥ η*
        assert!(solve_bvp(1.0, 0.0, 5.0, 1.0, 1, 32).is_err()); // grid too small
    }

    #[test]
    fn too_few_paths_is_a_budget_error() {
        let spec = OuSpec::for_system(1, 1.0);
        // Even if every path exits, fewer than 100 paths cannot satisfy the
        // exit-count floor.
        assert!(matches!(
            mc_exit_moment(1.0, 0.0, 0.0, &spec, 5.0, 50, 1e-3, 0),
            Err(ExitError::Budget(_))
        ));
    }

    #[test]
    fn csv_header_records_parameters() {
        let t = solve_bvp(1.0, 0.0, 5.0, 1.0, 1, 64).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("# a=1,c=0,eta_star=5,sigma=1,n=1,grid_size=64\n"));
        assert!(csv.lines().nth(1) == Some("eta,G,Gprime"));
        assert_eq!(csv.lines().count(), 2 + 65);
    }
}
