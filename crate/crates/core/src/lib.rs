//! Simulation and Lyapunov-function machinery for complex polynomial SDEs
//! of the form
//!
//! ```text
//! dz = [z^{n+1} + F(z, z̄)] dt + σ dB,    z ∈ ℂ,  n ≥ 1,
//! ```
//!
//! whose deterministic part blows up in finite time along `n` rays but which
//! is stabilized by the additive noise.  The crate provides:
//!
//! - [`model`]: the SDE system type, polar coordinates, the generator
//!   and its far-field asymptotic operators, and the radial region partition;
//! - [`exitmoments`]: exit-moment functions `G_a(η) = E_η e^{aτ}` of the
//!   unstable Ornstein-Uhlenbeck process (boundary-value solve, Monte-Carlo
//!   oracle, Weber-form residual) and the killed-generator eigenvalue λ₁;
//! - [`lyapunov`]: construction of the piecewise Lyapunov function Ψ from
//!   local solutions ψ₀..ψ₃, boundary-flux checks, and numerical drift
//!   certification 𝓛Ψ ≤ −mΦ + b;
//! - [`simulate`]: seeded adaptive Euler-Maruyama integrators (Cartesian and
//!   time-changed polar) plus reproducible parallel ensembles;
//! - [`stats`]: spike-spacing, tail-exponent, moment-threshold and exit-rate
//!   estimators with log-log fitting;
//! - [`experiments`]: the end-to-end experiment protocols the CLI and the
//!   acceptance suite share.

pub mod exitmoments;
pub mod experiments;
pub mod lyapunov;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod stats;
