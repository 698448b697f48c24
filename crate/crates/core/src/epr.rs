//! Streaming accumulation of the sample entropy production rate.
//!
//! Along a discretized path the two Itô-convention sums
//!
//! ```text
//! ito_sum  = Σ_k ⟨ψ(x_k), Δw_k⟩
//! quad_sum = Σ_k |ψ(x_k)|² h
//! ```
//!
//! are maintained with compensated summation, against the same increments
//! that drove the path — the accumulator is fed by the path observer and
//! never by re-simulated noise. Finalization produces
//!
//! ```text
//! t·R_t   = ito_sum + ½ quad_sum          log M_t = −t·R_t
//! S_t     = t(R_t − R) = ito_sum + ½(quad_sum − t·μ(|ψ|²))
//! S_t^§3  = ito_sum + (quad_sum − t·μ(|ψ|²))
//! ```
//!
//! Both centered functionals are carried: the bounded-variation part of the
//! second differs from the first by a factor two, the two conventions do
//! not coincide, and downstream asymptotics defaults to S_t = t(R_t − R).

use serde::{Deserialize, Serialize};

use crate::coupling::{VerificationMode, VerificationReport};
use crate::ensemble::replica_map;
use crate::error::{EprError, Result};
use crate::math::KahanSum;
use crate::model::ModelSpec;
use crate::noise::NoiseStream;
use crate::sde::{simulate_path_with_stream, PathConfig, PathObserver};

/// Running sums of the EPR functional along one path.
#[derive(Debug, Clone, Default)]
pub struct EprAccumulator {
    ito: KahanSum,
    quad: KahanSum,
    t: KahanSum,
}

impl EprAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one step given a precomputed ψ(x_k); hot path of the observer.
    #[inline]
    pub fn add_step(&mut self, psi: &[f64], dw: &[f64], h: f64) -> Result<()> {
        let mut dot = 0.0;
        let mut norm_sq = 0.0;
        for i in 0..psi.len() {
            dot += psi[i] * dw[i];
            norm_sq += psi[i] * psi[i];
        }
        if !(dot.is_finite() && norm_sq.is_finite()) {
            return Err(EprError::NonFinite {
                step: 0,
                t: self.t.value(),
                last_finite: psi.to_vec(),
            });
        }
        self.ito.add(dot);
        self.quad.add(norm_sq * h);
        self.t.add(h);
        Ok(())
    }

    /// Evaluate ψ at the left endpoint and add one step.
    pub fn accumulate(&mut self, model: &ModelSpec, x: &[f64], dw: &[f64], h: f64) -> Result<()> {
        let mut psi = vec![0.0; model.dim()];
        model.psi_into(x, &mut psi);
        self.add_step(&psi, dw, h)
    }

    pub fn ito_sum(&self) -> f64 {
        self.ito.value()
    }

    pub fn quad_sum(&self) -> f64 {
        self.quad.value()
    }

    pub fn t_accum(&self) -> f64 {
        self.t.value()
    }

    /// Close the accumulator against a reference μ(|ψ|²) = 2R.
    pub fn finalize(&self, mu_psi_sq: f64) -> Result<FunctionalSample> {
        let t = self.t.value();
        if t <= 0.0 {
            return Err(EprError::EmptyPath);
        }
        Ok(FunctionalSample::from_sums(
            t,
            self.ito.value(),
            self.quad.value(),
            mu_psi_sq,
        ))
    }
}

/// Resolve the centering constant μ(|ψ|²): the model's closed form when it
/// has one, otherwise 2·(supplied R̂).
pub fn resolve_mu_psi_sq(model: &ModelSpec, supplied_r: Option<f64>) -> Result<f64> {
    match (model.mu_psi_sq(), supplied_r) {
        (Some(m), _) => Ok(m),
        (None, Some(r)) => Ok(2.0 * r),
        (None, None) => Err(EprError::Config(format!(
            "model '{}' has no closed-form R and none was supplied",
            model.name()
        ))),
    }
}

/// Finalized values of the EPR functional at one time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FunctionalSample {
    pub t: f64,
    pub r_t: f64,
    /// S_t = t(R_t − R): the functional the limit theorems concern.
    pub s_t: f64,
    /// The §3-display variant with the un-halved bounded-variation part.
    pub s_t_sec3: f64,
    pub log_m_t: f64,
    pub ito_sum: f64,
    pub quad_sum: f64,
    pub mu_psi_sq: f64,
}

impl FunctionalSample {
    pub fn from_sums(t: f64, ito: f64, quad: f64, mu_psi_sq: f64) -> Self {
        let total = ito + 0.5 * quad;
        // +0.0 normalizes the −0.0 that a reversible model would produce.
        let log_m_t = -total + 0.0;
        let r_t = total / t;
        let half_w = 0.5 * (quad - t * mu_psi_sq);
        let s_t = ito + half_w;
        // Constructed from s_t so the factor-½ relation between the two
        // centered functionals holds exactly in floating point.
        let s_t_sec3 = s_t + half_w;
        Self {
            t,
            r_t,
            s_t,
            s_t_sec3,
            log_m_t,
            ito_sum: ito,
            quad_sum: quad,
            mu_psi_sq,
        }
    }
}

/// (t, S_t) checkpoints of one replica on an increasing grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub checkpoints: Vec<(f64, f64)>,
}

impl TrajectoryRecord {
    pub fn validate(&self) -> Result<()> {
        if self
            .checkpoints
            .windows(2)
            .any(|w| !(w[1].0 > w[0].0))
        {
            return Err(EprError::Config("checkpoint times must strictly increase".into()));
        }
        Ok(())
    }
}

/// The geometric checkpoint grid t_n = exp(n^θ), clipped to [e², T], with T
/// itself appended. θ defaults to 0.9 downstream.
pub fn geometric_checkpoints(t_max: f64, theta: f64) -> Result<Vec<f64>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(EprError::Parameter(format!("theta must lie in (0,1), got {theta}")));
    }
    let floor = std::f64::consts::E * std::f64::consts::E;
    if t_max < floor {
        return Err(EprError::Horizon(format!(
            "LIL grid needs T ≥ e² ≈ {floor:.3}, got {t_max}"
        )));
    }
    let mut ts = Vec::new();
    let mut n = 1u32;
    loop {
        let t = ((n as f64).powf(theta)).exp();
        if t > t_max {
            break;
        }
        if t >= floor {
            ts.push(t);
        }
        n += 1;
    }
    match ts.last() {
        Some(&last) if last < t_max => ts.push(t_max),
        None => ts.push(t_max),
        _ => {}
    }
    Ok(ts)
}

/// Path observer that accumulates the EPR sums and snapshots them at a
/// fixed set of checkpoint times.
pub struct EprObserver<'m> {
    model: &'m ModelSpec,
    acc: EprAccumulator,
    psi: Vec<f64>,
    h: f64,
    /// Sorted step indices at which to snapshot (sums cover [0, k·h)).
    checkpoint_steps: Vec<usize>,
    next_cp: usize,
    step: usize,
    /// (t, ito, quad) at each checkpoint.
    snapshots: Vec<(f64, f64, f64)>,
    psi_zero: bool,
}

impl<'m> EprObserver<'m> {
    pub fn new(model: &'m ModelSpec, h: f64) -> Self {
        Self {
            model,
            acc: EprAccumulator::new(),
            psi: vec![0.0; model.dim()],
            h,
            checkpoint_steps: Vec::new(),
            next_cp: 0,
            step: 0,
            snapshots: Vec::new(),
            psi_zero: model.psi_is_zero(),
        }
    }

    /// Snapshot the sums when the path reaches each of these times.
    pub fn with_checkpoints(mut self, times: &[f64]) -> Self {
        let mut steps: Vec<usize> = times
            .iter()
            .map(|&t| (t / self.h).round() as usize)
            .collect();
        steps.sort_unstable();
        steps.dedup();
        self.checkpoint_steps = steps;
        self
    }

    fn snapshot(&mut self) {
        self.snapshots.push((
            self.step as f64 * self.h,
            self.acc.ito_sum(),
            self.acc.quad_sum(),
        ));
    }

    /// Call after the path completes so a checkpoint at exactly t_end is
    /// captured (the observer never sees the post-final state).
    pub fn finish(&mut self, total_steps: usize) {
        if self.next_cp < self.checkpoint_steps.len()
            && self.checkpoint_steps[self.next_cp] == total_steps
        {
            self.step = total_steps;
            self.snapshot();
            self.next_cp += 1;
        }
    }

    pub fn accumulator(&self) -> &EprAccumulator {
        &self.acc
    }

    /// Finalized samples at every checkpoint, centered by `mu_psi_sq`.
    pub fn checkpoint_samples(&self, mu_psi_sq: f64) -> Vec<FunctionalSample> {
        self.snapshots
            .iter()
            .map(|&(t, ito, quad)| FunctionalSample::from_sums(t, ito, quad, mu_psi_sq))
            .collect()
    }

    pub fn trajectory_record(&self, mu_psi_sq: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            checkpoints: self
                .snapshots
                .iter()
                .map(|&(t, ito, quad)| {
                    (t, ito + 0.5 * (quad - t * mu_psi_sq))
                })
                .collect(),
        }
    }
}

impl<'m> PathObserver for EprObserver<'m> {
    #[inline]
    fn observe(&mut self, _t: f64, x: &[f64], dw: &[f64]) {
        if self.next_cp < self.checkpoint_steps.len()
            && self.step == self.checkpoint_steps[self.next_cp]
        {
            self.snapshot();
            self.next_cp += 1;
        }
        if self.psi_zero {
            self.acc.t.add(self.h);
        } else {
            self.model.psi_into(x, &mut self.psi);
            let mut dot = 0.0;
            let mut norm_sq = 0.0;
            for i in 0..self.psi.len() {
                dot += self.psi[i] * dw[i];
                norm_sq += self.psi[i] * self.psi[i];
            }
            self.acc.ito.add(dot);
            self.acc.quad.add(norm_sq * self.h);
            self.acc.t.add(self.h);
        }
        self.step += 1;
    }
}

/// Monte Carlo check of the martingale property E M_t = 1 over stationary
/// starts, with an effective-sample-size diagnostic for the heavy upper
/// tail of M_t. Horizons beyond t = 2 are rejected: the second moment of
/// M_t grows exponentially in t and the estimator loses meaning.
pub fn martingale_mean(
    model: &ModelSpec,
    t: f64,
    n: usize,
    h: f64,
    seed: u64,
) -> Result<VerificationReport> {
    if n < 100 {
        return Err(EprError::InsufficientSamples { needed: 100, got: n });
    }
    if t > 2.0 {
        return Err(EprError::Rejected(format!(
            "martingale check limited to t ≤ 2 (heavy-tailed M_t); got t = {t}"
        )));
    }
    if t == 0.0 {
        // M_0 = 1 identically.
        return Ok(VerificationReport::identity("martingale-mean", 1.0, 1.0, 0.0, 0.0, n)
            .with_extra("ess", n as f64));
    }
    let weights: Vec<f64> = replica_map(n, |i| {
        let mut stream = NoiseStream::new(seed, i as u64);
        let mut x0 = vec![0.0; model.dim()];
        model.sample_stationary(&mut stream, &mut x0);
        let cfg = PathConfig::new(h, t, seed, i as u64);
        let mut obs = EprObserver::new(model, h);
        simulate_path_with_stream(model, &x0, &cfg, &mut obs, &mut stream)
            .map(|_| (-(obs.acc.ito_sum() + 0.5 * obs.acc.quad_sum())).exp())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let (mean, se) = crate::math::mean_se(&weights);
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sum_sq > 0.0 { sum * sum / sum_sq } else { n as f64 };
    Ok(
        VerificationReport::identity("martingale-mean", mean, 1.0, se, 0.0, n)
            .with_extra("ess", ess),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reversible_ou, rotated_ou};

    #[test]
    fn accumulate_forced_arithmetic() {
        let mut acc = EprAccumulator::new();
        // ψ = (0, −2), dw = (0.1, 0.1), h = 0.01
        acc.add_step(&[0.0, -2.0], &[0.1, 0.1], 0.01).unwrap();
        assert!((acc.ito_sum() + 0.2).abs() < 1e-15);
        assert!((acc.quad_sum() - 0.04).abs() < 1e-15);
        assert!((acc.t_accum() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn accumulate_reversible_only_advances_time() {
        let model = reversible_ou(1.0, 2).unwrap();
        let mut acc = EprAccumulator::new();
        for _ in 0..10 {
            acc.accumulate(&model, &[0.4, -0.7], &[0.3, 0.1], 0.1).unwrap();
        }
        assert_eq!(acc.ito_sum(), 0.0);
        assert_eq!(acc.quad_sum(), 0.0);
        assert!((acc.t_accum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_grows_quad_linearly() {
        let mut acc = EprAccumulator::new();
        for k in 1..=5 {
            acc.add_step(&[1.0, 1.0], &[0.0, 0.0], 0.5).unwrap();
            assert_eq!(acc.ito_sum(), 0.0);
            assert!((acc.quad_sum() - k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn finalize_forced_arithmetic() {
        // ito=1, quad=4, t=2, R=2 → R_t = 1.5, S_t = −1, log M = −3.
        let s = FunctionalSample::from_sums(2.0, 1.0, 4.0, 4.0);
        assert!((s.r_t - 1.5).abs() < 1e-15);
        assert!((s.s_t + 1.0).abs() < 1e-15);
        assert!((s.log_m_t + 3.0).abs() < 1e-15);
        // §3 variant: ito + (quad − t·μ) = 1 + (4 − 8) = −3.
        assert!((s.s_t_sec3 + 3.0).abs() < 1e-15);
    }

    #[test]
    fn finalize_reversible_is_exactly_zero() {
        let s = FunctionalSample::from_sums(7.0, 0.0, 0.0, 0.0);
        assert_eq!(s.r_t, 0.0);
        assert_eq!(s.s_t, 0.0);
        assert_eq!(s.s_t_sec3, 0.0);
        assert_eq!(s.log_m_t, 0.0);
        assert!(s.log_m_t.is_sign_positive(), "−0.0 must be normalized");
    }

    #[test]
    fn finalize_empty_path_errors() {
        let acc = EprAccumulator::new();
        assert!(matches!(acc.finalize(0.0), Err(EprError::EmptyPath)));
    }

    #[test]
    fn log_m_identity_and_sec3_identity() {
        let mut stream = NoiseStream::new(3, 0);
        for _ in 0..200 {
            let t = 1.0 + 10.0 * stream.next_uniform();
            let ito = 3.0 * stream.next_standard_normal();
            let quad = 5.0 * stream.next_uniform() * t;
            let mu = 2.0 * stream.next_uniform();
            let s = FunctionalSample::from_sums(t, ito, quad, mu);
            assert!((s.log_m_t + s.t * s.r_t).abs() <= 1e-10 * (1.0 + s.log_m_t.abs()));
            let half_w = 0.5 * (quad - t * mu);
            assert_eq!(s.s_t_sec3, s.s_t + half_w, "§3 relation must hold bit-exactly");
        }
    }

    #[test]
    fn continuation_equals_whole_path() {
        // Accumulating a path in two halves on one accumulator is the same
        // operation sequence as accumulating it whole: bit-identical.
        let model = rotated_ou(1.0, 1.0).unwrap();
        let mut stream = NoiseStream::new(5, 0);
        let steps: Vec<([f64; 2], [f64; 2])> = (0..100)
            .map(|_| {
                (
                    [stream.next_standard_normal(), stream.next_standard_normal()],
                    [0.1 * stream.next_standard_normal(), 0.1 * stream.next_standard_normal()],
                )
            })
            .collect();
        let mut whole = EprAccumulator::new();
        for (x, dw) in &steps {
            whole.accumulate(&model, x, dw, 0.01).unwrap();
        }
        let mut halves = EprAccumulator::new();
        for (x, dw) in &steps[..50] {
            halves.accumulate(&model, x, dw, 0.01).unwrap();
        }
        for (x, dw) in &steps[50..] {
            halves.accumulate(&model, x, dw, 0.01).unwrap();
        }
        assert_eq!(whole.ito_sum(), halves.ito_sum());
        assert_eq!(whole.quad_sum(), halves.quad_sum());
        assert_eq!(whole.t_accum(), halves.t_accum());
    }

    #[test]
    fn non_finite_psi_is_reported() {
        let mut acc = EprAccumulator::new();
        assert!(matches!(
            acc.add_step(&[f64::NAN, 0.0], &[0.1, 0.1], 0.01),
            Err(EprError::NonFinite { .. })
        ));
    }

    #[test]
    fn geometric_grid_shape() {
        let ts = geometric_checkpoints(1e5, 0.9).unwrap();
        let floor = std::f64::consts::E * std::f64::consts::E;
        assert!(ts.iter().all(|&t| t >= floor && t <= 1e5));
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*ts.last().unwrap(), 1e5);
        // t_3 = e^{3^0.9} ≈ 14.69 is the first admissible point at θ = 0.9.
        assert!((ts[0] - (3f64.powf(0.9)).exp()).abs() < 1e-9);
        assert!(geometric_checkpoints(5.0, 0.9).is_err());
        assert!(geometric_checkpoints(1e4, 1.0).is_err());
    }

    #[test]
    fn martingale_reversible_is_exact() {
        let model = reversible_ou(1.0, 2).unwrap();
        let rep = martingale_mean(&model, 1.0, 200, 1e-2, 11).unwrap();
        assert_eq!(rep.lhs, 1.0);
        assert_eq!(rep.lhs_se, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn martingale_at_t_zero() {
        let model = rotated_ou(1.0, 1.0).unwrap();
        let rep = martingale_mean(&model, 0.0, 500, 1e-2, 1).unwrap();
        assert_eq!(rep.lhs, 1.0);
        assert!(rep.pass);
    }

    #[test]
    fn martingale_preconditions() {
        let model = rotated_ou(1.0, 1.0).unwrap();
        assert!(matches!(
            martingale_mean(&model, 1.0, 50, 1e-2, 1),
            Err(EprError::InsufficientSamples { .. })
        ));
        assert!(matches!(
            martingale_mean(&model, 3.0, 500, 1e-2, 1),
            Err(EprError::Rejected(_))
        ));
    }

    #[test]
    fn martingale_rotated_ou_small() {
        // Pilot-size run; the acceptance suite does n = 1e5 with h-halving.
        let model = rotated_ou(1.0, 1.0).unwrap();
        let rep = martingale_mean(&model, 0.5, 4000, 1e-3, 7).unwrap();
        assert!(rep.pass, "E M_t = {} ± {}", rep.lhs, rep.lhs_se);
        assert!(rep.extras["ess"] > 100.0);
    }
}
