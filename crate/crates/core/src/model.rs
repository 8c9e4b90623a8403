//! The SDE system, its coordinates, and its far-field geometry.
//!
//! The system is
//!
//! ```text
//! dz = [z^{n+1} + F(z, z̄)] dt + σ dB,     F(z, z̄) = Σ c_{jk} z^j z̄^k,
//! ```
//!
//! with the leading coefficient normalized to one and `deg F ≤ n`.  In polar
//! coordinates `z = r e^{iθ}` the generator acting on `f(r, θ)` reads
//!
//! ```text
//! 𝓛f = Re[(z^{n+1}+F) e^{-iθ}] ∂_r f + Im[(z^{n+1}+F) e^{-iθ}] / r ∂_θ f
//!      + σ²/2 ∂_r² f + σ²/(2r²) ∂_θ² f ,
//! ```
//!
//! and the time-changed operator is `L = r^{-n} 𝓛`.  The drift coefficients
//! are always evaluated numerically from `F` through the rotation identity
//! rather than expanded into trigonometric polynomials.
//!
//! Far from the origin, `L` is approximated by three asymptotic operators:
//!
//! ```text
//! T₁ = r cos(nθ) ∂_r + sin(nθ) ∂_θ              (region S1)
//! T₂ = r ∂_r + nθ ∂_θ                           (region S2)
//! A  = T₂ + σ²/(2 r^{n+2}) ∂_θ²                 (region S3)
//! ```
//!
//! The regions S0..S3 partition each wedge `|θ - 2πk/n| ≤ π/n` outside the
//! ball `r < r*`; see [`classify`].

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("document error: {0}")]
    Document(String),
}

/// The SDE `dz = [z^{n+1} + F(z, z̄)] dt + σ dB` with `F = Σ c_{jk} z^j z̄^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    n: u32,
    f_coeffs: BTreeMap<(u32, u32), Complex64>,
    sigma: f64,
    lower_order_terms_weak: bool,
}

impl SystemSpec {
    /// Build a spec, validating `n ≥ 1`, `σ ≥ 0` and `deg F ≤ n`.
    /// Zero coefficients are dropped.
    pub fn new(
        n: u32,
        coeffs: impl IntoIterator<Item = ((u32, u32), Complex64)>,
        sigma: f64,
    ) -> Result<Self, ModelError> {
        if n < 1 {
            return Err(ModelError::InvalidSystem("n must be at least 1".into()));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(ModelError::InvalidSystem("sigma must be finite and >= 0".into()));
        }
        let mut map = BTreeMap::new();
        for ((j, k), c) in coeffs {
            if !c.re.is_finite() || !c.im.is_finite() {
                return Err(ModelError::InvalidSystem("non-finite coefficient".into()));
            }
            if j + k > n {
                return Err(ModelError::InvalidSystem(format!(
                    "monomial z^{j} z̄^{k} has degree {} > n = {n}",
                    j + k
                )));
            }
            if c.norm_sqr() > 0.0 {
                map.insert((j, k), c);
            }
        }
        // Lower-order terms are "weak" when F is constant or every monomial
        // has degree at most ⌊n/2⌋ - 1.
        let cap = (n / 2) as i64 - 1;
        let small = map.keys().all(|&(j, k)| (j + k) as i64 <= cap);
        let constant = map.keys().all(|&(j, k)| j + k == 0);
        Ok(Self { n, f_coeffs: map, sigma, lower_order_terms_weak: constant || small })
    }

    /// The pure monomial system `dz = z^{n+1} dt + σ dB`.
    pub fn monomial(n: u32, sigma: f64) -> Self {
        Self::new(n, [], sigma).expect("monomial spec is always valid")
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self, ModelError> {
        Self::new(self.n, self.f_coeffs.iter().map(|(&k, &v)| (k, v)), sigma)
    }

    pub fn coeffs(&self) -> impl Iterator<Item = ((u32, u32), Complex64)> + '_ {
        self.f_coeffs.iter().map(|(&k, &v)| (k, v))
    }

    /// Whether the lower-order terms are weak enough for the piecewise
    /// Lyapunov construction (constant `F`, or `deg F ≤ ⌊n/2⌋ - 1`).
    pub fn lower_order_terms_weak(&self) -> bool {
        self.lower_order_terms_weak
    }

    /// `F(z, z̄)`.
    pub fn lower_order(&self, z: Complex64) -> Complex64 {
        let zbar = z.conj();
        let mut acc = Complex64::new(0.0, 0.0);
        for (&(j, k), &c) in &self.f_coeffs {
            acc += c * z.powu(j) * zbar.powu(k);
        }
        acc
    }

    /// Full Cartesian drift `z^{n+1} + F(z, z̄)`.
    pub fn drift(&self, z: Complex64) -> Complex64 {
        z.powu(self.n + 1) + self.lower_order(z)
    }

    /// Serialize to the plain structured-text document (`n`, `sigma`, and
    /// `(j, k, re, im)` coefficient rows).
    pub fn to_document(&self) -> String {
        let doc = SystemDoc {
            n: self.n,
            sigma: self.sigma,
            coeffs: self
                .f_coeffs
                .iter()
                .map(|(&(j, k), c)| (j, k, c.re, c.im))
                .collect(),
        };
        toml::to_string(&doc).expect("system document always serializes")
    }

    pub fn from_document(text: &str) -> Result<Self, ModelError> {
        let doc: SystemDoc =
            toml::from_str(text).map_err(|e| ModelError::Document(e.to_string()))?;
        Self::new(
            doc.n,
            doc.coeffs
                .into_iter()
                .map(|(j, k, re, im)| ((j, k), Complex64::new(re, im))),
            doc.sigma,
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemDoc {
    n: u32,
    sigma: f64,
    #[serde(default)]
    coeffs: Vec<(u32, u32, f64, f64)>,
}

/// A point in polar coordinates, `θ ∈ (-π, π]`, with `r = 0 ↦ θ = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarPoint {
    pub r: f64,
    pub theta: f64,
}

impl PolarPoint {
    pub fn new(r: f64, theta: f64) -> Self {
        Self { r, theta }
    }
}

pub fn to_polar(z: Complex64) -> PolarPoint {
    let r = z.norm();
    if r == 0.0 {
        return PolarPoint::new(0.0, 0.0);
    }
    let mut theta = z.arg(); // [-π, π]
    if theta <= -PI {
        theta = PI;
    }
    PolarPoint::new(r, theta)
}

pub fn to_cartesian(p: PolarPoint) -> Complex64 {
    Complex64::from_polar(p.r, p.theta)
}

/// Drift of `(r, θ)`: `(Re[(z^{n+1}+F) e^{-iθ}], Im[(z^{n+1}+F) e^{-iθ}]/r)`.
/// For `F ≡ 0` this is `(r^{n+1} cos nθ, r^n sin nθ)`.
pub fn polar_drift(spec: &SystemSpec, p: PolarPoint) -> Result<(f64, f64), ModelError> {
    if p.r <= 0.0 {
        return Err(ModelError::Domain("polar drift requires r > 0".into()));
    }
    let z = to_cartesian(p);
    let rotated = spec.drift(z) * Complex64::from_polar(1.0, -p.theta);
    Ok((rotated.re, rotated.im / p.r))
}

/// Value and partial derivatives of a scalar field at a point, as supplied
/// by the caller.  The generator has no ∂_r∂_θ term, so the mixed partial is
/// not needed.
#[derive(Debug, Clone, Copy, Default)]
pub struct FieldJet {
    pub value: f64,
    pub d_r: f64,
    pub d_theta: f64,
    pub d_rr: f64,
    pub d_thetatheta: f64,
}

/// Apply the generator 𝓛 (or `L = r^{-n} 𝓛` when `time_changed`) to the
/// field described by `jet` at `p`.
pub fn apply_generator(
    spec: &SystemSpec,
    jet: &FieldJet,
    p: PolarPoint,
    time_changed: bool,
) -> Result<f64, ModelError> {
    let (dr, dtheta) = polar_drift(spec, p)?;
    let s2 = spec.sigma * spec.sigma;
    let full = dr * jet.d_r
        + dtheta * jet.d_theta
        + 0.5 * s2 * jet.d_rr
        + 0.5 * s2 / (p.r * p.r) * jet.d_thetatheta;
    if time_changed {
        Ok(full / p.r.powi(spec.n as i32))
    } else {
        Ok(full)
    }
}

/// The asymptotic simplifications of `L`, valid in S1, S2, S3 respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsymptoticOp {
    /// `T₁ = r cos(nθ) ∂_r + sin(nθ) ∂_θ` — the leading monomial flow.
    Flow,
    /// `T₂ = r ∂_r + nθ ∂_θ` — the linearization of `T₁` (Euler operator).
    Euler,
    /// `A = T₂ + σ²/(2 r^{n+2}) ∂_θ²` — Euler plus the surviving noise term.
    EulerDiffusion,
}

pub fn apply_asymptotic(
    op: AsymptoticOp,
    jet: &FieldJet,
    p: PolarPoint,
    spec: &SystemSpec,
) -> Result<f64, ModelError> {
    if p.r <= 0.0 {
        return Err(ModelError::Domain("asymptotic operators require r > 0".into()));
    }
    let n = spec.n as f64;
    Ok(match op {
        AsymptoticOp::Flow => {
            p.r * (n * p.theta).cos() * jet.d_r + (n * p.theta).sin() * jet.d_theta
        }
        AsymptoticOp::Euler => p.r * jet.d_r + n * p.theta * jet.d_theta,
        AsymptoticOp::EulerDiffusion => {
            let s2 = spec.sigma * spec.sigma;
            p.r * jet.d_r
                + n * p.theta * jet.d_theta
                + 0.5 * s2 / p.r.powi(spec.n as i32 + 2) * jet.d_thetatheta
        }
    })
}

/// Parameters of the good radial partition: wedge-interior angles
/// `0 < θ₁* < θ₀*` with `θ₀* ∈ (π/2n, π/n)`, the strip half-width `η*` in the
/// rescaled angle `η = θ r^{(n+2)/2}`, and the inner radius `r*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub theta0: f64,
    pub theta1: f64,
    pub eta_star: f64,
    pub r_star: f64,
}

impl PartitionParams {
    pub fn validate(&self, n: u32) -> Result<(), ModelError> {
        let n_f = n as f64;
        if !(self.theta0 > PI / (2.0 * n_f) && self.theta0 < PI / n_f) {
            return Err(ModelError::InvalidPartition(format!(
                "theta0 = {} must lie in (π/2n, π/n)",
                self.theta0
            )));
        }
        if !(self.theta1 > 0.0 && self.theta1 < self.theta0) {
            return Err(ModelError::InvalidPartition("need 0 < theta1 < theta0".into()));
        }
        if !(self.eta_star > 0.0) {
            return Err(ModelError::InvalidPartition("eta_star must be positive".into()));
        }
        // r* must be large enough that the strip lies inside |θ| ≤ θ₁*, so
        // the extra angular bound on S3 is vacuous.
        if !(self.r_star > 0.0)
            || self.eta_star * self.r_star.powf(-(n_f + 2.0) / 2.0) >= self.theta1
        {
            return Err(ModelError::InvalidPartition(format!(
                "r_star = {} too small: eta*/r*^((n+2)/2) must be < theta1",
                self.r_star
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionKind {
    Ball,
    S0,
    S1,
    S2,
    S3,
}

/// A region label plus the wedge (rotation index) it was found in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionId {
    pub kind: RegionKind,
    pub wedge_index: u32,
}

/// Rotate `θ` into the principal wedge `[-π/n, π/n]`: returns the reduced
/// angle and the wedge index `k ∈ {0, .., n-1}` with `θ' = θ - 2πk/n`.
pub fn wedge_reduce(theta: f64, n: u32) -> (f64, u32) {
    let n_f = n as f64;
    let step = 2.0 * PI / n_f;
    let k = (theta / step).round() as i64;
    let theta_p = theta - k as f64 * step;
    let k_mod = k.rem_euclid(n as i64) as u32;
    (theta_p, k_mod)
}

/// Classify a point.  Boundary points go to the smaller kind index, so the
/// checks run Ball → S0 → S1 → S2 → S3 with closed inequalities.
pub fn classify(params: &PartitionParams, p: PolarPoint, n: u32) -> RegionId {
    let (theta_p, k) = wedge_reduce(p.theta, n);
    let a = theta_p.abs();
    let kind = if p.r < params.r_star {
        RegionKind::Ball
    } else if a >= params.theta0 {
        RegionKind::S0
    } else if a >= params.theta1 {
        RegionKind::S1
    } else if a * p.r.powf((n as f64 + 2.0) / 2.0) >= params.eta_star {
        RegionKind::S2
    } else {
        RegionKind::S3
    };
    RegionId { kind, wedge_index: k }
}

/// Membership in the closed region (boundaries included), up to a relative
/// tolerance; used to admit boundary evaluation of the local functions.
pub fn in_closed_region(
    params: &PartitionParams,
    n: u32,
    kind: RegionKind,
    p: PolarPoint,
    tol: f64,
) -> bool {
    let (theta_p, _) = wedge_reduce(p.theta, n);
    let a = theta_p.abs();
    let n_f = n as f64;
    if kind == RegionKind::Ball {
        return p.r <= params.r_star * (1.0 + tol);
    }
    if p.r < params.r_star * (1.0 - tol) {
        return false;
    }
    let eta = a * p.r.powf((n_f + 2.0) / 2.0);
    match kind {
        RegionKind::Ball => unreachable!(),
        RegionKind::S0 => a >= params.theta0 * (1.0 - tol),
        RegionKind::S1 => {
            a >= params.theta1 * (1.0 - tol) && a <= params.theta0 * (1.0 + tol)
        }
        RegionKind::S2 => {
            a <= params.theta1 * (1.0 + tol) && eta >= params.eta_star * (1.0 - tol)
        }
        RegionKind::S3 => eta <= params.eta_star * (1.0 + tol),
    }
}

/// The orbit constant `K = r / |sin(nθ)|^{1/n}` of the deterministic
/// monomial flow; the orbit through the point reaches maximal radius `K`
/// (attained at `θ = ±π/2n`).
pub fn orbit_k(p: PolarPoint, n: u32) -> Result<f64, ModelError> {
    let n_f = n as f64;
    let (theta_p, _) = wedge_reduce(p.theta, n);
    let a = theta_p.abs();
    if a == 0.0 || a >= PI / n_f {
        return Err(ModelError::Domain(format!(
            "orbit constant requires 0 < |θ| < π/n, got θ' = {theta_p}"
        )));
    }
    Ok(p.r / (n_f * a).sin().abs().powf(1.0 / n_f))
}

/// Blow-up time of `ṙ = r^{n+1}` from `r₀`: `T* = 1/(n r₀^n)`.
pub fn blowup_time_monomial(r0: f64, n: u32) -> f64 {
    1.0 / (n as f64 * r0.powi(n as i32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn jet(value: f64, d_r: f64, d_theta: f64, d_rr: f64, d_tt: f64) -> FieldJet {
        FieldJet { value, d_r, d_theta, d_rr, d_thetatheta: d_tt }
    }

    #[test]
    fn polar_round_trip_conventions() {
        let p = to_polar(Complex64::new(1.0, 0.0));
        assert_eq!((p.r, p.theta), (1.0, 0.0));
        let p = to_polar(Complex64::new(0.0, 0.0));
        assert_eq!((p.r, p.theta), (0.0, 0.0));
        let p = to_polar(Complex64::new(0.0, -2.0));
        assert_abs_diff_eq!(p.r, 2.0);
        assert_abs_diff_eq!(p.theta, -PI / 2.0);
    }

    #[test]
    fn polar_drift_monomial_values() {
        let s1 = SystemSpec::monomial(1, 0.0);
        let (dr, dth) = polar_drift(&s1, PolarPoint::new(2.0, 0.0)).unwrap();
        assert_relative_eq!(dr, 4.0, max_relative = 1e-14);
        assert_abs_diff_eq!(dth, 0.0, epsilon = 1e-14);

        let (dr, dth) = polar_drift(&s1, PolarPoint::new(1.0, PI / 2.0)).unwrap();
        assert_abs_diff_eq!(dr, 0.0, epsilon = 1e-14);
        assert_relative_eq!(dth, 1.0, max_relative = 1e-14);

        let s2 = SystemSpec::monomial(2, 0.0);
        let (dr, dth) = polar_drift(&s2, PolarPoint::new(1.0, PI / 2.0)).unwrap();
        assert_relative_eq!(dr, -1.0, max_relative = 1e-13);
        assert_abs_diff_eq!(dth, 0.0, epsilon = 1e-13);

        assert!(polar_drift(&s1, PolarPoint::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn generator_hand_derived_values() {
        let spec = SystemSpec::monomial(1, 1.0);
        let at = PolarPoint::new(1.0, PI);
        // f = r: 𝓛f = r² cos θ = -1
        let v = apply_generator(&spec, &jet(1.0, 1.0, 0.0, 0.0, 0.0), at, false).unwrap();
        assert_relative_eq!(v, -1.0, max_relative = 1e-12);
        // f = const: annihilated
        let v = apply_generator(&spec, &jet(3.5, 0.0, 0.0, 0.0, 0.0), at, false).unwrap();
        assert_abs_diff_eq!(v, 0.0);
        // f = r²: drift 2r³cosθ = -2, plus σ²/2 · 2 = 1
        let v = apply_generator(&spec, &jet(1.0, 2.0, 0.0, 2.0, 0.0), at, false).unwrap();
        assert_relative_eq!(v, -1.0, max_relative = 1e-12);
    }

    #[test]
    fn time_change_is_exact_radial_factor() {
        let spec = SystemSpec::new(2, [((1, 0), Complex64::new(0.3, -0.2))], 0.7).unwrap();
        let j = jet(2.0, 0.5, -1.5, 0.25, 2.0);
        for &(r, th) in &[(3.0, 0.4), (10.0, -2.0), (0.5, 3.0)] {
            let p = PolarPoint::new(r, th);
            let full = apply_generator(&spec, &j, p, false).unwrap();
            let slow = apply_generator(&spec, &j, p, true).unwrap();
            assert_eq!(slow, full / r.powi(2));
        }
    }

    #[test]
    fn asymptotic_operator_values() {
        let spec = SystemSpec::monomial(2, 1.0);
        let n = 2.0;
        // T2 on r^p is p r^p.
        let p_exp = 1.3;
        let at = PolarPoint::new(2.0, 0.1);
        let j = jet(
            at.r.powf(p_exp),
            p_exp * at.r.powf(p_exp - 1.0),
            0.0,
            p_exp * (p_exp - 1.0) * at.r.powf(p_exp - 2.0),
            0.0,
        );
        let v = apply_asymptotic(AsymptoticOp::Euler, &j, at, &spec).unwrap();
        assert_relative_eq!(v, p_exp * at.r.powf(p_exp), max_relative = 1e-13);

        // T1 on f = r at (1, π/2n): r cos(π/2) = 0.
        let at = PolarPoint::new(1.0, PI / (2.0 * n));
        let v = apply_asymptotic(AsymptoticOp::Flow, &jet(1.0, 1.0, 0.0, 0.0, 0.0), at, &spec)
            .unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);

        // A on f = θ²: 2nθ² + σ²/r^{n+2}.
        let at = PolarPoint::new(1.7, 0.23);
        let j = jet(at.theta * at.theta, 0.0, 2.0 * at.theta, 0.0, 2.0);
        let v = apply_asymptotic(AsymptoticOp::EulerDiffusion, &j, at, &spec).unwrap();
        let expect = 2.0 * n * at.theta * at.theta + 1.0 / at.r.powi(4);
        assert_relative_eq!(v, expect, max_relative = 1e-13);
    }

    #[test]
    fn classify_regions_and_boundaries() {
        let n = 2;
        let params =
            PartitionParams { theta0: 3.0 * PI / 8.0, theta1: 0.1, eta_star: 6.0, r_star: 12.0 };
        params.validate(n).unwrap();

        let c = classify(&params, PolarPoint::new(6.0, 1.0), n);
        assert_eq!(c.kind, RegionKind::Ball);
        let c = classify(&params, PolarPoint::new(20.0, 0.0), n);
        assert_eq!(c.kind, RegionKind::S3);
        let c = classify(&params, PolarPoint::new(20.0, PI / 2.0), n);
        assert_eq!(c.kind, RegionKind::S0);
        // Boundary ties go to the smaller kind index.
        let c = classify(&params, PolarPoint::new(20.0, params.theta0), n);
        assert_eq!(c.kind, RegionKind::S0);
        let c = classify(&params, PolarPoint::new(20.0, params.theta1), n);
        assert_eq!(c.kind, RegionKind::S1);
        // Wedge rotation: same kind one wedge over, with the index recorded.
        let c = classify(&params, PolarPoint::new(20.0, PI), n);
        assert_eq!(c.kind, RegionKind::S3);
        assert_eq!(c.wedge_index, 1);
    }

    #[test]
    fn orbit_constant_examples() {
        for n in 1..=3u32 {
            let k = orbit_k(PolarPoint::new(5.0, PI / (2.0 * n as f64)), n).unwrap();
            assert_relative_eq!(k, 5.0, max_relative = 1e-13);
        }
        let k = orbit_k(PolarPoint::new(1.0, PI / 4.0), 1).unwrap();
        assert_relative_eq!(k, std::f64::consts::SQRT_2, max_relative = 1e-13);
        assert!(orbit_k(PolarPoint::new(1.0, 0.0), 1).is_err());
        assert!(orbit_k(PolarPoint::new(1.0, PI), 1).is_err());
    }

    #[test]
    fn blowup_time_examples() {
        assert_relative_eq!(blowup_time_monomial(1.0, 1), 1.0);
        assert_relative_eq!(blowup_time_monomial(1.0, 2), 0.5);
        assert_relative_eq!(blowup_time_monomial(2.0, 1), 0.5);
    }

    #[test]
    fn system_document_round_trip_is_exact() {
        let spec = SystemSpec::new(
            3,
            [
                ((0, 0), Complex64::new(0.1 + 1e-17, -2.0 / 3.0)),
                ((2, 1), Complex64::new(-1.25, 3.7e-11)),
            ],
            0.1234567890123456789,
        )
        .unwrap();
        let doc = spec.to_document();
        let back = SystemSpec::from_document(&doc).unwrap();
        assert_eq!(spec, back);
        // Unknown keys must be rejected.
        assert!(SystemSpec::from_document("n = 1\nsigma = 1.0\nbogus = 3\n").is_err());
    }

    #[test]
    fn degree_bounds_and_weak_lower_order_flag() {
        assert!(SystemSpec::new(1, [((1, 1), Complex64::new(1.0, 0.0))], 1.0).is_err());
        let s = SystemSpec::new(1, [((0, 0), Complex64::new(0.5, 0.0))], 1.0).unwrap();
        assert!(s.lower_order_terms_weak());
        let s = SystemSpec::new(4, [((1, 0), Complex64::new(0.5, 0.0))], 1.0).unwrap();
        assert!(s.lower_order_terms_weak()); // deg 1 ≤ ⌊4/2⌋-1
        let s = SystemSpec::new(4, [((2, 0), Complex64::new(0.5, 0.0))], 1.0).unwrap();
        assert!(!s.lower_order_terms_weak());
    }
}
