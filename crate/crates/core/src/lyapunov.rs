//! Piecewise Lyapunov functions for the polynomial SDE.
//!
//! On the principal wedge `|θ| ≤ π/n`, `r ≥ r*`, the partition S0..S3 of
//! [`crate::model::classify`] carries four local functions:
//!
//! ```text
//! ψ₀ = r^p                                               on S0
//! T₁ψ₁ = -h₁ r^p |θ|^{-q},  ψ₁ = ψ₀ at |θ| = θ₀*          on S1
//! T₂ψ₂ = -h₂ r^p |θ|^{-q},  ψ₂ = ψ₁ at |θ| = θ₁*          on S2
//! Aψ₃  = -h₃ r^{p₃},        ψ₃ = ψ₂ at |θ| r^{(n+2)/2} = η*   on S3
//! ```
//!
//! with `p = γ - n ∈ (0, n)`, `q ∈ (p/n, 1)`, `p₂ = p(3n+2)/(2n)` and
//! `p₃ = p + q(n+2)/2`.  ψ₁ and ψ₂ have closed forms (ψ₁ up to a smooth
//! one-dimensional quadrature); ψ₃ is assembled from the exit-moment tables
//! `G_{p₂}, G_{p₃}` of [`crate::exitmoments`]:
//!
//! ```text
//! ψ₃ = c₁ r^{p₃} G_{p₃}(η) + c₂ r^{p₂} G_{p₂}(η) - c₃ r^{p₃},
//! η = θ r^{(n+2)/2}.
//! ```
//!
//! The natural extension Ψ glues the pieces with a C² radial cutoff Λ
//! (zero for `r ≤ r*`, one for `r ≥ 2r*`) and averages on shared boundaries.
//! Ψ is only piecewise C², so instead of smoothing, the construction is
//! certified by two numerical checks: the one-sided angular derivative jump
//! across every interface must be ≤ 0 ([`check_flux`]), and the drift
//! inequality `𝓛Ψ ≤ -mΦ + b` must hold on a log-radial grid with `Φ = r^γ`
//! or `Φ = Ψ^{1+δ}` ([`verify_drift`]).

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exitmoments::{solve_bvp, ExitError, ExitMomentTable};
use crate::model::{
    apply_generator, in_closed_region, wedge_reduce, FieldJet, ModelError, PartitionParams,
    PolarPoint, RegionId, RegionKind, SystemSpec,
};

#[derive(Error, Debug)]
pub enum LyapunovError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("point is outside region {expected:?}: r = {r}, theta = {theta}")]
    Region { expected: RegionKind, r: f64, theta: f64 },
    #[error("quadrature failed: {0}")]
    Quadrature(String),
    #[error("exit-moment table error: {0}")]
    Table(#[from] ExitError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("drift verification failed: {worst_margin} at {} points", violations.len())]
    Verification { violations: Vec<Violation>, worst_margin: f64 },
    #[error("parameter search failed:\n{trace}")]
    Search { trace: String },
}

/// Exponents, boundary-data constants and partition of the construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovParams {
    pub n: u32,
    pub gamma: f64,
    pub p: f64,
    pub q: f64,
    pub p2: f64,
    pub p3: f64,
    pub delta: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub partition: PartitionParams,
}

impl LyapunovParams {
    pub fn validate(&self) -> Result<(), LyapunovError> {
        let n = self.n as f64;
        let err = |m: String| Err(LyapunovError::Domain(m));
        if !(self.gamma > n && self.gamma < 2.0 * n) {
            return err(format!("gamma = {} outside (n, 2n)", self.gamma));
        }
        if !(self.p > 0.0 && self.p < n) || (self.p - (self.gamma - n)).abs() > 1e-12 {
            return err(format!("p = {} must equal gamma - n and lie in (0, n)", self.p));
        }
        if !(self.q > self.p / n && self.q < 1.0) {
            return err(format!("q = {} outside (p/n, 1)", self.q));
        }
        let p2 = self.p * (3.0 * n + 2.0) / (2.0 * n);
        let p3 = self.p + self.q * (n + 2.0) / 2.0;
        if (self.p2 - p2).abs() > 1e-10 || (self.p3 - p3).abs() > 1e-10 {
            return err("p2/p3 inconsistent with p, q".into());
        }
        if !(self.p2 < self.p3 && self.p3 < 1.5 * n + 1.0) {
            return err(format!("need p2 < p3 < 3n/2+1, got {} and {}", self.p2, self.p3));
        }
        let h1_cap = self.p * self.partition.theta0.powf(self.q)
            * (n * self.partition.theta0).cos().abs();
        if !(self.h1 > 0.0 && self.h1 < h1_cap) {
            return err(format!("h1 = {} outside (0, {h1_cap})", self.h1));
        }
        if !(self.h2 > 0.0 && self.h2 < self.h1) {
            return err("need 0 < h2 < h1".into());
        }
        if !(self.h3 > 0.0) {
            return err("h3 must be positive".into());
        }
        if !(self.delta > 0.0 && self.delta <= n / self.p3 + 1e-12) {
            return err(format!("delta = {} outside (0, n/p3]", self.delta));
        }
        self.partition.validate(self.n)?;
        Ok(())
    }
}

/// The two exit-moment tables behind ψ₃.
#[derive(Debug, Clone)]
pub struct PsiTables {
    pub g_p2: ExitMomentTable,
    pub g_p3: ExitMomentTable,
}

/// Build the `G_{p₂}, G_{p₃}` tables for the given parameters and noise.
pub fn build_tables(params: &LyapunovParams, sigma: f64) -> Result<PsiTables, LyapunovError> {
    let eta_star = params.partition.eta_star;
    let rate = 1.5 * params.n as f64 + 1.0;
    // Keep the mesh Peclet number rate·η·h/(σ²/2) below 1.
    let peclet = (4.0 * rate * eta_star * eta_star / (sigma * sigma)).ceil() as usize;
    let grid = peclet.next_power_of_two().max(8192);
    Ok(PsiTables {
        g_p2: solve_bvp(params.p2, 0.0, eta_star, sigma, params.n, grid)?,
        g_p3: solve_bvp(params.p3, 0.0, eta_star, sigma, params.n, grid)?,
    })
}

/// A local Lyapunov value with optional first and second partials
/// (∂r, ∂θ) and (∂r², ∂θ², ∂r∂θ).
#[derive(Debug, Clone, Copy)]
pub struct PsiValue {
    pub value: f64,
    pub region: RegionId,
    pub gradient: Option<(f64, f64)>,
    pub second: Option<(f64, f64, f64)>,
}

// ---------------------------------------------------------------------------
// quadrature

/// Adaptive Simpson integration to a relative tolerance.
fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    rel_tol: f64,
) -> Result<f64, LyapunovError> {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), fm)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64, LyapunovError> {
        let m = 0.5 * (a + b);
        let (left, flm) = simpson(f, a, fa, m, fm);
        let (right, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if !delta.is_finite() {
            return Err(LyapunovError::Quadrature("non-finite integrand".into()));
        }
        if delta.abs() <= 15.0 * tol * (left + right).abs().max(1e-300) || depth > 48 {
            if depth > 48 && delta.abs() > 1e6 * tol * (left + right).abs() {
                return Err(LyapunovError::Quadrature("tolerance unreachable".into()));
            }
            return Ok(left + right + delta / 15.0);
        }
        Ok(recurse(f, a, fa, m, fm, left, flm, tol, depth + 1)?
            + recurse(f, m, fm, b, fb, right, frm, tol, depth + 1)?)
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, fm, rel_tol, 0)
}

// ---------------------------------------------------------------------------
// the local pieces, written for θ > 0 and reflected by evenness

/// Context with the per-parameter constants precomputed (one quadrature for
/// `ψ₁(1, θ₁*)`, then everything downstream is closed-form).
pub struct PsiCtx<'a> {
    pub params: &'a LyapunovParams,
    pub tables: &'a PsiTables,
    /// ψ₂ = C r^p |θ|^{-p/n} + D r^p |θ|^{-q}
    c_big: f64,
    d_coef: f64,
    c1: f64,
    c2: f64,
    c3: f64,
}

impl<'a> PsiCtx<'a> {
    pub fn new(params: &'a LyapunovParams, tables: &'a PsiTables) -> Result<Self, LyapunovError> {
        let pt = &params.partition;
        let psi1_at_theta1 = psi1_angular(params, pt.theta1)?;
        let d_coef = params.h2 / (params.q * params.n as f64 - params.p);
        let pn = params.p / params.n as f64;
        let c_big = pt.theta1.powf(pn) * psi1_at_theta1 - d_coef * pt.theta1.powf(pn - params.q);
        let c1 = params.h3 / params.p3 + d_coef / pt.eta_star.powf(params.q);
        let c2 = c_big / pt.eta_star.powf(pn);
        let c3 = params.h3 / params.p3;
        Ok(Self { params, tables, c_big, d_coef, c1, c2, c3 })
    }

    pub fn psi2_coefficients(&self) -> (f64, f64) {
        (self.c_big, self.d_coef)
    }

    pub fn psi3_coefficients(&self) -> (f64, f64, f64) {
        (self.c1, self.c2, self.c3)
    }
}

/// `ψ₁(1, θ)` for `θ ∈ [θ₁*, θ₀*]`:
/// `sin(nθ)^{-p/n} (sin(nθ₀*)^{p/n} + h₁ ∫_θ^{θ₀*} sin(nα)^{p/n-1} α^{-q} dα)`.
fn psi1_angular(params: &LyapunovParams, theta: f64) -> Result<f64, LyapunovError> {
    let n = params.n as f64;
    let pn = params.p / n;
    let theta0 = params.partition.theta0;
    let integrand = |alpha: f64| (n * alpha).sin().powf(pn - 1.0) * alpha.powf(-params.q);
    let integral = adaptive_simpson(&integrand, theta, theta0, 1e-10)?;
    let boundary = (n * theta0).sin().powf(pn);
    Ok((n * theta).sin().powf(-pn) * (boundary + params.h1 * integral))
}

/// Angular factor of ψ₁ together with its first two derivatives, θ > 0.
/// The first derivative comes from the defining transport equation.
fn psi1_angular_jet(params: &LyapunovParams, theta: f64) -> Result<(f64, f64, f64), LyapunovError> {
    let n = params.n as f64;
    let g = psi1_angular(params, theta)?;
    let s = (n * theta).sin();
    let c = (n * theta).cos();
    let numer = params.p * c * g + params.h1 * theta.powf(-params.q);
    let g1 = -numer / s;
    let numer_d = -params.p * n * s * g + params.p * c * g1
        - params.q * params.h1 * theta.powf(-params.q - 1.0);
    let g2 = -(numer_d * s - numer * n * c) / (s * s);
    Ok((g, g1, g2))
}

fn region_err(expected: RegionKind, p: PolarPoint) -> LyapunovError {
    LyapunovError::Region { expected, r: p.r, theta: p.theta }
}

const REGION_TOL: f64 = 1e-9;

/// Assemble a PsiValue for `ψ(r, θ) = r^e · g(|θ'|)` from the angular jet,
/// reflecting the odd derivatives for θ' < 0.
fn from_angular(
    e: f64,
    r: f64,
    theta_signed: f64,
    g: f64,
    g1: f64,
    g2: f64,
    region: RegionId,
) -> PsiValue {
    let sign = if theta_signed < 0.0 { -1.0 } else { 1.0 };
    let re = r.powf(e);
    PsiValue {
        value: re * g,
        region,
        gradient: Some((e * re / r * g, re * sign * g1)),
        second: Some((
            e * (e - 1.0) * re / (r * r) * g,
            re * g2,
            e * re / r * sign * g1,
        )),
    }
}

/// ψ₀ = r^p on S0.
pub fn psi0(params: &LyapunovParams, at: PolarPoint) -> Result<PsiValue, LyapunovError> {
    if !in_closed_region(&params.partition, params.n, RegionKind::S0, at, REGION_TOL) {
        return Err(region_err(RegionKind::S0, at));
    }
    let (theta_p, k) = wedge_reduce(at.theta, params.n);
    Ok(from_angular(
        params.p,
        at.r,
        theta_p,
        1.0,
        0.0,
        0.0,
        RegionId { kind: RegionKind::S0, wedge_index: k },
    ))
}

/// ψ₁ on (closed) S1.
pub fn psi1(params: &LyapunovParams, at: PolarPoint) -> Result<PsiValue, LyapunovError> {
    if !in_closed_region(&params.partition, params.n, RegionKind::S1, at, REGION_TOL) {
        return Err(region_err(RegionKind::S1, at));
    }
    let (theta_p, k) = wedge_reduce(at.theta, params.n);
    let (g, g1, g2) = psi1_angular_jet(params, theta_p.abs())?;
    Ok(from_angular(
        params.p,
        at.r,
        theta_p,
        g,
        g1,
        g2,
        RegionId { kind: RegionKind::S1, wedge_index: k },
    ))
}

/// ψ₂ on (closed) S2, fully closed-form.
pub fn psi2(ctx: &PsiCtx, at: PolarPoint) -> Result<PsiValue, LyapunovError> {
    let params = ctx.params;
    if !in_closed_region(&params.partition, params.n, RegionKind::S2, at, REGION_TOL) {
        return Err(region_err(RegionKind::S2, at));
    }
    let (theta_p, k) = wedge_reduce(at.theta, params.n);
    let a = theta_p.abs();
    if a == 0.0 {
        return Err(LyapunovError::Domain("psi2 is singular at theta = 0".into()));
    }
    let pn = params.p / params.n as f64;
    let q = params.q;
    let (c, d) = (ctx.c_big, ctx.d_coef);
    let g = c * a.powf(-pn) + d * a.powf(-q);
    let g1 = -c * pn * a.powf(-pn - 1.0) - d * q * a.powf(-q - 1.0);
    let g2 = c * pn * (pn + 1.0) * a.powf(-pn - 2.0) + d * q * (q + 1.0) * a.powf(-q - 2.0);
    Ok(from_angular(
        params.p,
        at.r,
        theta_p,
        g,
        g1,
        g2,
        RegionId { kind: RegionKind::S2, wedge_index: k },
    ))
}

/// ψ₃ on (closed) S3, from the exit-moment tables.
pub fn psi3(ctx: &PsiCtx, at: PolarPoint) -> Result<PsiValue, LyapunovError> {
    let params = ctx.params;
    if !in_closed_region(&params.partition, params.n, RegionKind::S3, at, REGION_TOL) {
        return Err(region_err(RegionKind::S3, at));
    }
    let (theta_p, k) = wedge_reduce(at.theta, params.n);
    let n = params.n as f64;
    let s = (n + 2.0) / 2.0;
    let r = at.r;
    let rs = r.powf(s);
    let eta = theta_p * rs;
    let eta_star = params.partition.eta_star;
    // Guard against a hair of float overshoot on the boundary itself.
    let eta = eta.clamp(-eta_star, eta_star);

    let (c1, c2, c3) = (ctx.c1, ctx.c2, ctx.c3);
    let (p2, p3) = (params.p2, params.p3);
    let g2v = ctx.tables.g_p2.g(eta)?;
    let g2p = ctx.tables.g_p2.g_prime(eta)?;
    let g2pp = ctx.tables.g_p2.g_second(eta)?;
    let g3v = ctx.tables.g_p3.g(eta)?;
    let g3p = ctx.tables.g_p3.g_prime(eta)?;
    let g3pp = ctx.tables.g_p3.g_second(eta)?;

    let rp2 = r.powf(p2);
    let rp3 = r.powf(p3);
    let value = c1 * rp3 * g3v + c2 * rp2 * g2v - c3 * rp3;

    let d_theta = rs * (c1 * rp3 * g3p + c2 * rp2 * g2p);
    let d_tt = rs * rs * (c1 * rp3 * g3pp + c2 * rp2 * g2pp);
    let d_r = c1 * rp3 / r * (p3 * g3v + s * eta * g3p)
        + c2 * rp2 / r * (p2 * g2v + s * eta * g2p)
        - c3 * p3 * rp3 / r;
    let d_rr = c1 * rp3 / (r * r)
        * ((p3 - 1.0) * (p3 * g3v + s * eta * g3p)
            + p3 * s * eta * g3p
            + s * s * eta * g3p
            + s * s * eta * eta * g3pp)
        + c2 * rp2 / (r * r)
            * ((p2 - 1.0) * (p2 * g2v + s * eta * g2p)
                + p2 * s * eta * g2p
                + s * s * eta * g2p
                + s * s * eta * eta * g2pp)
        - c3 * p3 * (p3 - 1.0) * rp3 / (r * r);
    let d_rt = rs / r
        * (c1 * rp3 * ((s + p3) * g3p + s * eta * g3pp)
            + c2 * rp2 * ((s + p2) * g2p + s * eta * g2pp));

    Ok(PsiValue {
        value,
        region: RegionId { kind: RegionKind::S3, wedge_index: k },
        gradient: Some((d_r, d_theta)),
        second: Some((d_rr, d_tt, d_rt)),
    })
}

// ---------------------------------------------------------------------------
// the natural extension

/// Quintic smoothstep in log r: 0 for r ≤ r*, 1 for r ≥ 2r*, C² in between.
/// Returns (Λ, Λ', Λ'').
pub fn cutoff(r: f64, r_star: f64) -> (f64, f64, f64) {
    if r <= r_star {
        return (0.0, 0.0, 0.0);
    }
    if r >= 2.0 * r_star {
        return (1.0, 0.0, 0.0);
    }
    let ln2 = std::f64::consts::LN_2;
    let x = (r / r_star).ln() / ln2;
    let s = x * x * x * (10.0 + x * (-15.0 + 6.0 * x));
    let s1 = x * x * (30.0 + x * (-60.0 + 30.0 * x));
    let s2 = x * (60.0 + x * (-180.0 + 120.0 * x));
    let l1 = s1 / (r * ln2);
    let l2 = s2 / (r * r * ln2 * ln2) - s1 / (r * r * ln2);
    (s, l1, l2)
}

fn local_psi(ctx: &PsiCtx, kind: RegionKind, at: PolarPoint) -> Result<PsiValue, LyapunovError> {
    match kind {
        RegionKind::S0 => psi0(ctx.params, at),
        RegionKind::S1 => psi1(ctx.params, at),
        RegionKind::S2 => psi2(ctx, at),
        RegionKind::S3 => psi3(ctx, at),
        RegionKind::Ball => Err(LyapunovError::Domain("no local function on the ball".into())),
    }
}

/// Which boundary (if any) a wedge-reduced point sits on, to within a
/// relative tolerance: the two region kinds being glued.
fn on_boundary(
    params: &LyapunovParams,
    r: f64,
    theta_abs: f64,
    tol: f64,
) -> Option<(RegionKind, RegionKind)> {
    let pt = &params.partition;
    let n = params.n as f64;
    if (theta_abs - pt.theta0).abs() <= tol * pt.theta0 {
        return Some((RegionKind::S0, RegionKind::S1));
    }
    if (theta_abs - pt.theta1).abs() <= tol * pt.theta1 {
        return Some((RegionKind::S1, RegionKind::S2));
    }
    let eta = theta_abs * r.powf((n + 2.0) / 2.0);
    if (eta - pt.eta_star).abs() <= tol * pt.eta_star {
        return Some((RegionKind::S2, RegionKind::S3));
    }
    None
}

/// The natural extension Ψ: zero on the ball, `Λ(r) ψ_i` on region
/// interiors, the average of the two adjacent values on shared boundaries.
pub fn psi(ctx: &PsiCtx, at: PolarPoint) -> Result<PsiValue, LyapunovError> {
    let params = ctx.params;
    let region = crate::model::classify(&params.partition, at, params.n);
    if region.kind == RegionKind::Ball {
        return Ok(PsiValue { value: 0.0, region, gradient: None, second: None });
    }
    let (lambda, _, _) = cutoff(at.r, params.partition.r_star);
    let (theta_p, _) = wedge_reduce(at.theta, params.n);
    let value = match on_boundary(params, at.r, theta_p.abs(), 1e-12) {
        Some((ka, kb)) => {
            let va = local_psi(ctx, ka, at)?.value;
            let vb = local_psi(ctx, kb, at)?.value;
            0.5 * (va + vb)
        }
        None => local_psi(ctx, region.kind, at)?.value,
    };
    Ok(PsiValue { value: lambda * value, region, gradient: None, second: None })
}

/// Full jet of Ψ = Λ(r) ψ_region at a region-interior point.
pub fn psi_jet(ctx: &PsiCtx, at: PolarPoint) -> Result<(FieldJet, RegionId), LyapunovError> {
    let params = ctx.params;
    let region = crate::model::classify(&params.partition, at, params.n);
    if region.kind == RegionKind::Ball {
        return Ok((FieldJet::default(), region));
    }
    let local = local_psi(ctx, region.kind, at)?;
    let (g_r, g_t) = local.gradient.expect("local psi always carries a gradient");
    let (g_rr, g_tt, _) = local.second.expect("local psi always carries second partials");
    let (l, l1, l2) = cutoff(at.r, params.partition.r_star);
    Ok((
        FieldJet {
            value: l * local.value,
            d_r: l * g_r + l1 * local.value,
            d_theta: l * g_t,
            d_rr: l * g_rr + 2.0 * l1 * g_r + l2 * local.value,
            d_thetatheta: l * g_tt,
        },
        region,
    ))
}

// `d_rt` of Ψ would be `l*g_rt + l1*g_t`; the generator has no mixed term,
// so the jet type does not carry it.

// ---------------------------------------------------------------------------
// flux checks

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// `θ = ±θ₀*` between S0 and S1.
    Theta0,
    /// `θ = ±θ₁*` between S1 and S2.
    Theta1,
    /// `θ r^{(n+2)/2} = ±η*` between S2 and S3.
    EtaStar,
    /// `θ = ±π/n` between adjacent wedges.
    WedgeEdge,
}

pub const ALL_BOUNDARIES: [Boundary; 4] =
    [Boundary::Theta0, Boundary::Theta1, Boundary::EtaStar, Boundary::WedgeEdge];

/// One signed jump `[∂_θ Ψ]⁺ - [∂_θ Ψ]⁻` (upper minus lower one-sided
/// angular derivative) at a boundary point.
#[derive(Debug, Clone, Copy)]
pub struct FluxJump {
    pub boundary: Boundary,
    pub r: f64,
    pub theta: f64,
    pub jump: f64,
}

fn one_sided_dtheta(
    ctx: &PsiCtx,
    kind: RegionKind,
    at: PolarPoint,
) -> Result<f64, LyapunovError> {
    let v = local_psi(ctx, kind, at)?;
    Ok(v.gradient.expect("gradient available").1)
}

/// Evaluate the angular-derivative jumps across one interface family at the
/// given radii (both the +θ and -θ copies).  For admissible parameters every
/// jump is ≤ 0; violations are returned as data, not errors.
pub fn check_flux(
    ctx: &PsiCtx,
    boundary: Boundary,
    r_samples: &[f64],
) -> Result<Vec<FluxJump>, LyapunovError> {
    let params = ctx.params;
    let pt = &params.partition;
    let n = params.n as f64;
    let mut out = Vec::with_capacity(2 * r_samples.len());
    for &r in r_samples {
        if r < pt.r_star {
            return Err(LyapunovError::Domain(format!(
                "flux samples must satisfy r >= r_star, got {r}"
            )));
        }
        let (lambda, _, _) = cutoff(r, pt.r_star);
        let pairs: [(f64, RegionKind, RegionKind); 2] = match boundary {
            // (θ_b, upper-side region, lower-side region)
            Boundary::Theta0 => [
                (pt.theta0, RegionKind::S0, RegionKind::S1),
                (-pt.theta0, RegionKind::S1, RegionKind::S0),
            ],
            Boundary::Theta1 => [
                (pt.theta1, RegionKind::S1, RegionKind::S2),
                (-pt.theta1, RegionKind::S2, RegionKind::S1),
            ],
            Boundary::EtaStar => {
                let tb = pt.eta_star * r.powf(-(n + 2.0) / 2.0);
                [
                    (tb, RegionKind::S2, RegionKind::S3),
                    (-tb, RegionKind::S3, RegionKind::S2),
                ]
            }
            Boundary::WedgeEdge => [
                (PI / n, RegionKind::S0, RegionKind::S0),
                (-PI / n, RegionKind::S0, RegionKind::S0),
            ],
        };
        for (theta_b, upper, lower) in pairs {
            let at = PolarPoint::new(r, theta_b);
            let jump = if boundary == Boundary::WedgeEdge {
                // Ψ = r^p on both sides of the wedge edge by symmetry.
                0.0
            } else {
                lambda * (one_sided_dtheta(ctx, upper, at)? - one_sided_dtheta(ctx, lower, at)?)
            };
            out.push(FluxJump { boundary, r, theta: theta_b, jump });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// drift verification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhiKind {
    /// Φ = r^γ
    PowerGamma,
    /// Φ = Ψ^{1+δ}
    PsiOnePlusDelta,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerifyGrid {
    /// Log-spaced radii in [r*, r_max_factor · r*].
    pub n_radii: usize,
    pub r_max_factor: f64,
    /// Angular strata per region family per sign.
    pub n_theta_per_region: usize,
}

impl Default for VerifyGrid {
    fn default() -> Self {
        Self { n_radii: 200, r_max_factor: 100.0, n_theta_per_region: 40 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Violation {
    pub r: f64,
    pub theta: f64,
    /// 𝓛Ψ at the point.
    pub lhs: f64,
    /// -mΦ + b at the point.
    pub rhs: f64,
}

/// Outcome of a successful drift verification: `𝓛Ψ ≤ -mΦ + b` held on the
/// whole grid with margin `worst_margin = min(-𝓛Ψ/Φ)` over `r ≥ 2r*`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub gamma: f64,
    pub phi: PhiKind,
    pub m: f64,
    pub b: f64,
    pub r_star: f64,
    pub r_max: f64,
    pub grid: VerifyGrid,
    pub worst_margin: f64,
    pub per_region_worst: Vec<(RegionKind, f64)>,
    pub violations: Vec<Violation>,
}

impl Certificate {
    /// Structured-text report: a params block, (m, b), worst margins per
    /// region, then one row per violation.
    pub fn report(&self, params: &LyapunovParams) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[params]");
        let _ = writeln!(s, "n={}", params.n);
        let _ = writeln!(s, "gamma={}", params.gamma);
        let _ = writeln!(s, "p={}", params.p);
        let _ = writeln!(s, "q={}", params.q);
        let _ = writeln!(s, "p2={}", params.p2);
        let _ = writeln!(s, "p3={}", params.p3);
        let _ = writeln!(s, "delta={}", params.delta);
        let _ = writeln!(s, "h1={}", params.h1);
        let _ = writeln!(s, "h2={}", params.h2);
        let _ = writeln!(s, "h3={}", params.h3);
        let _ = writeln!(s, "theta0={}", params.partition.theta0);
        let _ = writeln!(s, "theta1={}", params.partition.theta1);
        let _ = writeln!(s, "eta_star={}", params.partition.eta_star);
        let _ = writeln!(s, "r_star={}", params.partition.r_star);
        let _ = writeln!(s, "[certificate]");
        let phi = match self.phi {
            PhiKind::PowerGamma => "power",
            PhiKind::PsiOnePlusDelta => "psidelta",
        };
        let _ = writeln!(s, "phi={phi}");
        let _ = writeln!(s, "m={}", self.m);
        let _ = writeln!(s, "b={}", self.b);
        let _ = writeln!(s, "r_max={}", self.r_max);
        let _ = writeln!(s, "worst_margin={}", self.worst_margin);
        for (kind, margin) in &self.per_region_worst {
            let _ = writeln!(s, "worst_margin_{kind:?}={margin}");
        }
        let _ = writeln!(s, "violations={}", self.violations.len());
        if !self.violations.is_empty() {
            let _ = writeln!(s, "r,theta,lhs,rhs");
            for v in &self.violations {
                let _ = writeln!(s, "{},{},{},{}", v.r, v.theta, v.lhs, v.rhs);
            }
        }
        s
    }
}

/// The verification grid: log-spaced radii, stratum midpoints per region and
/// sign, S3 stratified in the rescaled angle η.
fn grid_points(params: &LyapunovParams, grid: &VerifyGrid) -> Vec<PolarPoint> {
    let pt = &params.partition;
    let n = params.n as f64;
    let mut points = Vec::new();
    let r_max = pt.r_star * grid.r_max_factor;
    for j in 0..grid.n_radii {
        let f = (j as f64 + 0.5) / grid.n_radii as f64;
        let r = pt.r_star * (r_max / pt.r_star).powf(f);
        let eta_edge = pt.eta_star * r.powf(-(n + 2.0) / 2.0);
        let m = grid.n_theta_per_region;
        for i in 0..m {
            let t = (i as f64 + 0.5) / m as f64;
            let th_s0 = pt.theta0 + t * (PI / n - pt.theta0);
            let th_s1 = pt.theta1 + t * (pt.theta0 - pt.theta1);
            let th_s2 = eta_edge + t * (pt.theta1 - eta_edge);
            let th_s3 = t * eta_edge;
            for th in [th_s0, th_s1, th_s2, th_s3] {
                points.push(PolarPoint::new(r, th));
                points.push(PolarPoint::new(r, -th));
            }
        }
    }
    points
}

/// Finite-difference 𝓛Ψ from Ψ values only; `None` when the stencil would
/// cross a region boundary.
fn fd_generator(
    spec: &SystemSpec,
    ctx: &PsiCtx,
    at: PolarPoint,
) -> Result<Option<f64>, LyapunovError> {
    let region = crate::model::classify(&ctx.params.partition, at, ctx.params.n);
    let hr = 1e-4 * at.r;
    let ht = 1e-4 * at.theta.abs().max(1e-3 / at.r.powf((ctx.params.n as f64 + 2.0) / 2.0));
    let vals = |dr: f64, dth: f64| -> Result<Option<f64>, LyapunovError> {
        let p = PolarPoint::new(at.r + dr, at.theta + dth);
        if crate::model::classify(&ctx.params.partition, p, ctx.params.n).kind != region.kind {
            return Ok(None);
        }
        Ok(Some(psi_jet(ctx, p)?.0.value))
    };
    let mut sample = [[0.0; 5]; 2];
    for (axis, h) in [(0usize, hr), (1usize, ht)] {
        for (k, mult) in [-2.0f64, -1.0, 0.0, 1.0, 2.0].into_iter().enumerate() {
            let (dr, dth) = if axis == 0 { (mult * h, 0.0) } else { (0.0, mult * h) };
            match vals(dr, dth)? {
                Some(v) => sample[axis][k] = v,
                None => return Ok(None),
            }
        }
    }
    let d1 = |s: &[f64; 5], h: f64| (s[0] - 8.0 * s[1] + 8.0 * s[3] - s[4]) / (12.0 * h);
    let d2 = |s: &[f64; 5], h: f64| {
        (-s[0] + 16.0 * s[1] - 30.0 * s[2] + 16.0 * s[3] - s[4]) / (12.0 * h * h)
    };
    let jet = FieldJet {
        value: sample[0][2],
        d_r: d1(&sample[0], hr),
        d_theta: d1(&sample[1], ht),
        d_rr: d2(&sample[0], hr),
        d_thetatheta: d2(&sample[1], ht),
    };
    Ok(Some(apply_generator(spec, &jet, at, false)?))
}

/// Verify `𝓛Ψ ≤ -mΦ + b` on the grid.  Returns the certificate with the
/// largest far-field `m` and the smallest matching `b`; failure carries the
/// violating points.
pub fn verify_drift(
    spec: &SystemSpec,
    params: &LyapunovParams,
    tables: &PsiTables,
    grid: &VerifyGrid,
    phi: PhiKind,
) -> Result<Certificate, LyapunovError> {
    params.validate()?;
    let ctx = PsiCtx::new(params, tables)?;
    let points = grid_points(params, grid);
    let r_cutoff = 2.0 * params.partition.r_star;

    let mut worst_margin = f64::INFINITY;
    let mut per_region: Vec<(RegionKind, f64)> = [
        RegionKind::S0,
        RegionKind::S1,
        RegionKind::S2,
        RegionKind::S3,
    ]
    .iter()
    .map(|&k| (k, f64::INFINITY))
    .collect();
    let mut rows = Vec::with_capacity(points.len());
    let mut fd_checked = 0usize;
    let mut fd_worst: f64 = 0.0;

    for (idx, &at) in points.iter().enumerate() {
        let (jet, region) = psi_jet(&ctx, at)?;
        let lhs = apply_generator(spec, &jet, at, false)?;
        let phi_val = match phi {
            PhiKind::PowerGamma => at.r.powf(params.gamma),
            PhiKind::PsiOnePlusDelta => jet.value.max(0.0).powf(1.0 + params.delta),
        };
        rows.push((at, lhs, phi_val, region.kind));
        if at.r >= r_cutoff && phi_val > 0.0 {
            let ratio = -lhs / phi_val;
            worst_margin = worst_margin.min(ratio);
            for entry in per_region.iter_mut() {
                if entry.0 == region.kind {
                    entry.1 = entry.1.min(ratio);
                }
            }
        }
        // Independent finite-difference cross-check at 1% of the points.
        if idx % 100 == 37 {
            if let Some(fd) = fd_generator(spec, &ctx, at)? {
                let scale = lhs.abs().max(fd.abs()).max(1e-9 * phi_val.max(1.0));
                fd_checked += 1;
                fd_worst = fd_worst.max((lhs - fd).abs() / scale);
            }
        }
    }
    if fd_checked > 0 && fd_worst > 1e-4 {
        return Err(LyapunovError::Domain(format!(
            "closed-form generator disagrees with finite differences: rel {fd_worst}"
        )));
    }

    if !(worst_margin > 0.0) {
        let violations: Vec<Violation> = {
            let mut v: Vec<Violation> = rows
                .iter()
                .filter(|(at, lhs, phiv, _)| at.r >= r_cutoff && -lhs / phiv <= 0.0)
                .map(|&(at, lhs, phiv, _)| Violation {
                    r: at.r,
                    theta: at.theta,
                    lhs,
                    rhs: -worst_margin.max(0.0) * phiv,
                })
                .collect();
            v.sort_by(|a, b| (a.r, a.theta).partial_cmp(&(b.r, b.theta)).unwrap());
            v
        };
        return Err(LyapunovError::Verification { violations, worst_margin });
    }

    let m = worst_margin;
    let mut b = 0.0f64;
    for &(_, lhs, phi_val, _) in &rows {
        b = b.max(lhs + m * phi_val);
    }
    Ok(Certificate {
        gamma: params.gamma,
        phi,
        m,
        b,
        r_star: params.partition.r_star,
        r_max: params.partition.r_star * grid.r_max_factor,
        grid: *grid,
        worst_margin,
        per_region_worst: per_region,
        violations: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// parameter derivation

/// Optional pins for [`derive_params`]; anything left `None` is defaulted or
/// found by the search loop.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParamOverrides {
    pub theta0: Option<f64>,
    pub q: Option<f64>,
    /// h1 as a fraction of its cap `p θ₀^q |cos nθ₀|`; default 0.5.
    pub h1_frac: Option<f64>,
    /// h2 as a fraction of h1; default 0.5.
    pub h2_frac: Option<f64>,
    pub delta: Option<f64>,
    pub theta1: Option<f64>,
    pub eta_star: Option<f64>,
    pub r_star: Option<f64>,
    pub h3: Option<f64>,
}

fn candidate_params(
    n: u32,
    gamma: f64,
    ov: &ParamOverrides,
    theta1: f64,
    eta_star: f64,
    r_star: f64,
    h3: f64,
) -> LyapunovParams {
    let n_f = n as f64;
    let p = gamma - n_f;
    let q = ov.q.unwrap_or((p / n_f + 1.0) / 2.0);
    let theta0 = ov.theta0.unwrap_or(3.0 * PI / (4.0 * n_f));
    let h1 = ov.h1_frac.unwrap_or(0.5) * p * theta0.powf(q) * (n_f * theta0).cos().abs();
    let h2 = ov.h2_frac.unwrap_or(0.5) * h1;
    let p2 = p * (3.0 * n_f + 2.0) / (2.0 * n_f);
    let p3 = p + q * (n_f + 2.0) / 2.0;
    let delta = ov.delta.unwrap_or(n_f / (2.0 * p3));
    LyapunovParams {
        n,
        gamma,
        p,
        q,
        p2,
        p3,
        delta,
        h1,
        h2,
        h3,
        partition: PartitionParams { theta0, theta1, eta_star, r_star },
    }
}

/// Search for admissible parameters: θ₁* is halved from π/(4n) until the
/// S1/S2 flux is negative, then η* is doubled from 8 and h₃ halved from h₂
/// until the S2/S3 flux is negative, then r* is doubled from the partition
/// bound until both flux checks and the drift verification (with both Φ
/// choices) pass.  Returns the parameters and the exit-moment tables used.
pub fn derive_params(
    spec: &SystemSpec,
    gamma: f64,
    overrides: &ParamOverrides,
) -> Result<(LyapunovParams, PsiTables), LyapunovError> {
    let n = spec.n();
    let n_f = n as f64;
    if !(gamma > n_f && gamma < 2.0 * n_f) {
        return Err(LyapunovError::Domain(format!("gamma = {gamma} outside (n, 2n) = ({n_f}, {})", 2.0 * n_f)));
    }
    if !(spec.sigma() > 0.0) {
        return Err(LyapunovError::Domain("Lyapunov construction needs sigma > 0".into()));
    }
    let mut trace = String::new();
    let ov = *overrides;

    let theta1_list: Vec<f64> = match ov.theta1 {
        Some(t) => vec![t],
        None => (0..=10).map(|j| PI / (4.0 * n_f) / f64::powi(2.0, j)).collect(),
    };
    let eta_list: Vec<f64> = match ov.eta_star {
        Some(e) => vec![e],
        None => (0..=5).map(|i| 8.0 * f64::powi(2.0, i)).collect(),
    };

    for &theta1 in &theta1_list {
        // Cheap closed-form S1/S2 flux sign at this θ₁* (r-independent after
        // factoring r^p; evaluated through the exact jump below with a token
        // partition so ψ₁/ψ₂ are constructible).
        for &eta_star in &eta_list {
            let r_floor = (eta_star / theta1).powf(2.0 / (n_f + 2.0)) * 1.1;
            let h3_list: Vec<f64> = match ov.h3 {
                Some(h) => vec![h],
                None => {
                    let h2 = candidate_params(n, gamma, &ov, theta1, eta_star, r_floor, 1.0).h2;
                    (1..=8).map(|l| h2 / f64::powi(2.0, l)).collect()
                }
            };
            for &h3 in &h3_list {
                let r_list: Vec<f64> = match ov.r_star {
                    Some(r) => vec![r],
                    None => (0..=4).map(|k| r_floor * f64::powi(2.0, k)).collect(),
                };
                for &r_star in &r_list {
                    let params = candidate_params(n, gamma, &ov, theta1, eta_star, r_star, h3);
                    if let Err(e) = params.validate() {
                        let _ = writeln!(trace, "reject {theta1:.4e}/{eta_star}/{r_star:.3}/{h3:.3e}: {e}");
                        continue;
                    }
                    let tables = build_tables(&params, spec.sigma())?;
                    let ctx = PsiCtx::new(&params, &tables)?;
                    let r_samples: Vec<f64> = (0..24)
                        .map(|i| r_star * f64::powf(100.0, i as f64 / 23.0))
                        .collect();
                    let mut flux_ok = true;
                    'flux: for b in ALL_BOUNDARIES {
                        for j in check_flux(&ctx, b, &r_samples)? {
                            if j.jump > 1e-12 * (1.0 + j.r.powf(params.p3)) {
                                let _ = writeln!(
                                    trace,
                                    "flux>0 on {b:?} at r={:.3} (jump {:.3e}) for θ₁*={theta1:.4e} η*={eta_star} r*={r_star:.3} h₃={h3:.3e}",
                                    j.r, j.jump
                                );
                                flux_ok = false;
                                break 'flux;
                            }
                        }
                    }
                    if !flux_ok {
                        continue;
                    }
                    let grid = VerifyGrid { n_radii: 120, r_max_factor: 100.0, n_theta_per_region: 24 };
                    let both = [PhiKind::PowerGamma, PhiKind::PsiOnePlusDelta]
                        .into_iter()
                        .try_for_each(|phi| {
                            verify_drift(spec, &params, &tables, &grid, phi).map(|_| ())
                        });
                    match both {
                        Ok(()) => return Ok((params, tables)),
                        Err(e) => {
                            let _ = writeln!(
                                trace,
                                "verify failed for θ₁*={theta1:.4e} η*={eta_star} r*={r_star:.3} h₃={h3:.3e}: {e}"
                            );
                        }
                    }
                }
            }
        }
    }
    Err(LyapunovError::Search { trace })
}
