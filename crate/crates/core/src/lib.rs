//! Simulation laboratory for the sample entropy production rate (EPR) of
//! stationary nonreversible diffusions
//!
//! The object of study is the SDE
//!
//! ```text
//! dX_t = B(X_t) dt + σ(X_t) dW_t
//! ```
//!
//! with a dissipative drift and invertible diffusion, its invariant density
//! ρ, and the pathwise functional
//!
//! ```text
//! t·R_t = ∫_0^t ⟨ψ(X_s), dW_s⟩ + ½ ∫_0^t |ψ(X_s)|² ds,
//! ψ = 2σ⁻¹B − σ*∇log ρ,
//! ```
//!
//! which is the log-density of the path law against the law of the time
//! reversal, per unit time. The crate provides:
//!
//! * [`sde`] — fixed-step Euler–Maruyama integration with reproducible
//!   counter-based Gaussian streams and streaming path observers;
//! * [`model`] — concrete model families (linear OU, rotated Gaussian with
//!   constant or state-dependent diffusion) carrying analytic stationary
//!   data and closed forms for R and the asymptotic variance δ;
//! * [`epr`] — streaming accumulation of R_t, the centered functional
//!   S_t = t(R_t − R) and the Girsanov weight log M_t along a path;
//! * [`ensemble`] — deterministic replica ensembles (optionally parallel);
//! * [`asymptotics`] — estimators and statistical tests for the CLT,
//!   moderate-deviation rate curves and law-of-iterated-logarithm envelopes
//!   of S_t;
//! * [`coupling`] — Monte Carlo verification of the coupling-by-change-of-
//!   measure construction, the dimension-free Harnack inequality, the
//!   Bismut-type integration by parts formula and exponential moment bounds.
//!
//! Everything is deterministic given (seed, stream id): replaying a
//! configuration reproduces every number bit for bit, independent of worker
//! count.

pub mod asymptotics;
pub mod coupling;
pub mod ensemble;
pub mod epr;
pub mod error;
pub mod math;
pub mod model;
pub mod noise;
pub mod sde;

pub use error::{EprError, Result};
pub use model::ModelSpec;
pub use noise::NoiseStream;
