//! Fixed-step Euler–Maruyama integration with streaming observers.
//!
//! Drift and diffusion are evaluated at the left endpoint of every step, so
//! the stochastic sums fed to the observers are Itô sums against the same
//! increments that drove the path — the EPR functional depends on that.
//!
//! Step counts come from `round(t_end / h)`; the realized horizon
//! `steps · h` is reported so a horizon that is not an exact multiple of
//! the step can never drift silently.

use serde::{Deserialize, Serialize};

use crate::error::{EprError, Result};
use crate::model::ModelSpec;
use crate::noise::NoiseStream;

/// Path integration parameters. `stream_id` selects the replica substream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PathConfig {
    pub h: f64,
    pub t_end: f64,
    pub burn_in: f64,
    pub seed: u64,
    pub stream_id: u64,
}

impl PathConfig {
    pub fn new(h: f64, t_end: f64, seed: u64, stream_id: u64) -> Self {
        Self {
            h,
            t_end,
            burn_in: 0.0,
            seed,
            stream_id,
        }
    }

    pub fn with_burn_in(mut self, burn_in: f64) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(EprError::Config(format!("step size must be positive, got {}", self.h)));
        }
        if !(self.t_end >= self.h) {
            return Err(EprError::Config(format!(
                "horizon {} shorter than one step {}",
                self.t_end, self.h
            )));
        }
        if !(self.burn_in >= 0.0 && self.burn_in.is_finite()) {
            return Err(EprError::Config("burn-in must be non-negative".into()));
        }
        Ok(())
    }

    /// Observed steps: round(t_end / h), at least 1.
    pub fn steps(&self) -> usize {
        (self.t_end / self.h).round().max(1.0) as usize
    }

    pub fn burn_steps(&self) -> usize {
        (self.burn_in / self.h).round() as usize
    }

    /// The horizon actually integrated.
    pub fn realized_t(&self) -> f64 {
        self.steps() as f64 * self.h
    }
}

/// Streaming consumer of (t_k, x_k, dw_k) triples, where x_k is the left
/// endpoint of the step that consumes dw_k and t_k counts from the end of
/// burn-in.
pub trait PathObserver {
    fn observe(&mut self, t: f64, x: &[f64], dw: &[f64]);
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl PathObserver for NoopObserver {
    #[inline]
    fn observe(&mut self, _t: f64, _x: &[f64], _dw: &[f64]) {}
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathSummary {
    pub steps: usize,
    pub burn_steps: usize,
    pub realized_t: f64,
    pub final_state: Vec<f64>,
    /// Largest |x| reached over the whole run, burn-in included.
    pub max_norm: f64,
}

/// One Euler–Maruyama step: x + B(x)·h + σ(x)·dw.
pub fn em_step(model: &ModelSpec, x: &[f64], inc_dw: &[f64], h: f64, out: &mut [f64]) -> Result<()> {
    let d = model.dim();
    if x.len() != d || inc_dw.len() != d || out.len() != d {
        return Err(EprError::DimensionMismatch {
            expected: d,
            got: x.len().min(inc_dw.len()).min(out.len()),
        });
    }
    let mut drift = vec![0.0; d];
    model.drift_into(x, &mut drift);
    let mut noise = vec![0.0; d];
    model.sigma_apply_into(x, inc_dw, &mut noise);
    for i in 0..d {
        out[i] = x[i] + drift[i] * h + noise[i];
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(EprError::NonFinite {
            step: 0,
            t: 0.0,
            last_finite: x.to_vec(),
        });
    }
    Ok(())
}

/// Drift of the time-reversed SDE: σσ*∇log ρ(x) − B(x).
pub fn reversed_drift(model: &ModelSpec, x: &[f64]) -> Result<Vec<f64>> {
    let d = model.dim();
    if x.len() != d {
        return Err(EprError::DimensionMismatch { expected: d, got: x.len() });
    }
    let mut grad = vec![0.0; d];
    model.grad_log_rho_into(x, &mut grad);
    let sig = model.sigma().matrix(x);
    let aa = &sig * sig.transpose();
    let mut b = vec![0.0; d];
    model.drift_into(x, &mut b);
    let mut out = vec![0.0; d];
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += aa[(i, j)] * grad[j];
        }
        out[i] = acc - b[i];
    }
    Ok(out)
}

/// Advance the forward SDE over the configured horizon, feeding the
/// observer after burn-in. Aborts with a structured error on the first
/// non-finite coordinate: dissipative models should never trigger it, so it
/// is treated as a bug signal, not clamped.
pub fn simulate_path<O: PathObserver>(
    model: &ModelSpec,
    init: &[f64],
    cfg: &PathConfig,
    observer: &mut O,
) -> Result<PathSummary> {
    let mut stream = NoiseStream::new(cfg.seed, cfg.stream_id);
    simulate_path_with_stream(model, init, cfg, observer, &mut stream)
}

/// [`simulate_path`] on a caller-owned stream, so a replica can spend
/// counters on its initial draw and the path from one replayable stream.
pub fn simulate_path_with_stream<O: PathObserver>(
    model: &ModelSpec,
    init: &[f64],
    cfg: &PathConfig,
    observer: &mut O,
    stream: &mut NoiseStream,
) -> Result<PathSummary> {
    cfg.validate()?;
    let d = model.dim();
    if init.len() != d {
        return Err(EprError::DimensionMismatch { expected: d, got: init.len() });
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(EprError::Config("initial state must be finite".into()));
    }

    let mut x = init.to_vec();
    let mut x_next = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let h = cfg.h;
    let burn_steps = cfg.burn_steps();
    let steps = cfg.steps();
    let identity_sigma = model.sigma_is_identity();

    let mut max_norm_sq = x.iter().map(|v| v * v).sum::<f64>();

    let mut advance = |x: &mut Vec<f64>,
                       x_next: &mut Vec<f64>,
                       dw: &[f64],
                       drift: &mut [f64],
                       noise: &mut [f64],
                       max_norm_sq: &mut f64| {
        model.drift_into(x, drift);
        if identity_sigma {
            for i in 0..d {
                x_next[i] = x[i] + drift[i] * h + dw[i];
            }
        } else {
            model.sigma_apply_into(x, dw, noise);
            for i in 0..d {
                x_next[i] = x[i] + drift[i] * h + noise[i];
            }
        }
        let mut norm_sq = 0.0;
        let mut finite = true;
        for &v in x_next.iter() {
            norm_sq += v * v;
            finite &= v.is_finite();
        }
        if norm_sq > *max_norm_sq {
            *max_norm_sq = norm_sq;
        }
        std::mem::swap(x, x_next);
        finite && norm_sq.is_finite()
    };

    for k in 0..burn_steps {
        stream.fill_wiener(h, &mut dw);
        if !advance(&mut x, &mut x_next, &dw, &mut drift, &mut noise, &mut max_norm_sq) {
            // x and x_next were swapped; the previous state is in x_next.
            return Err(EprError::NonFinite {
                step: k,
                t: (k + 1) as f64 * h - cfg.burn_in,
                last_finite: x_next.clone(),
            });
        }
    }

    for k in 0..steps {
        let t = k as f64 * h;
        stream.fill_wiener(h, &mut dw);
        observer.observe(t, &x, &dw);
        if !advance(&mut x, &mut x_next, &dw, &mut drift, &mut noise, &mut max_norm_sq) {
            return Err(EprError::NonFinite {
                step: burn_steps + k,
                t: (k + 1) as f64 * h,
                last_finite: x_next.clone(),
            });
        }
    }

    Ok(PathSummary {
        steps,
        burn_steps,
        realized_t: cfg.realized_t(),
        final_state: x,
        max_norm: max_norm_sq.sqrt(),
    })
}

/// Fitted constants of the dissipativity condition
/// ⟨B(x)−B(y), x−y⟩ ≤ κ|x−y| − K|x−y|² over sampled pairs; for
/// state-dependent σ the strengthened form
/// ‖σ(x)−σ(y)‖²_HS + 2⟨B(x)−B(y), x−y⟩ ≤ −K|x−y|² is fitted instead
/// (with κ ≡ 0, as the multiplicative condition carries no κ term).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DissipativityReport {
    pub kappa: f64,
    pub k_rate: f64,
    pub satisfied: bool,
    pub n_pairs: usize,
    pub radius: f64,
    pub multiplicative: bool,
}

/// Uniform point in the centered ball of the given radius.
fn sample_in_ball(d: usize, radius: f64, stream: &mut NoiseStream, out: &mut [f64]) {
    let mut norm_sq = 0.0;
    for o in out.iter_mut() {
        *o = stream.next_standard_normal();
        norm_sq += *o * *o;
    }
    let norm = norm_sq.sqrt().max(f64::MIN_POSITIVE);
    let r = radius * stream.next_uniform().powf(1.0 / d as f64);
    for o in out.iter_mut() {
        *o *= r / norm;
    }
}

/// Fit (κ, K) from pair samples of a drift (and optionally σ) field.
///
/// The κ = 0 fit is tried first; when some pair forbids any K > 0 at κ = 0,
/// κ is raised along a geometric grid until a positive K appears (bounded
/// drift perturbations need that), and the report flags violation when no
/// grid point works.
pub fn fit_dissipativity(
    d: usize,
    drift: impl Fn(&[f64], &mut [f64]),
    sigma_hs: Option<&dyn Fn(&[f64], &[f64]) -> f64>,
    n_pairs: usize,
    radius: f64,
    stream: &mut NoiseStream,
) -> Result<DissipativityReport> {
    if n_pairs == 0 {
        return Err(EprError::Config("need at least one pair".into()));
    }
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    // (s_i, r_i) with s = ⟨ΔB, Δx⟩ (+ HS term, already combined) and r = |Δx|.
    let mut samples = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        sample_in_ball(d, radius, stream, &mut x);
        sample_in_ball(d, radius, stream, &mut y);
        let mut r_sq = 0.0;
        for i in 0..d {
            let dxi = x[i] - y[i];
            r_sq += dxi * dxi;
        }
        if r_sq == 0.0 {
            // x = y pairs give the vacuous constraint 0 ≤ 0.
            continue;
        }
        drift(&x, &mut bx);
        drift(&y, &mut by);
        let mut inner = 0.0;
        for i in 0..d {
            inner += (bx[i] - by[i]) * (x[i] - y[i]);
        }
        let s = match sigma_hs {
            Some(hs) => hs(&x, &y) + 2.0 * inner,
            None => inner,
        };
        samples.push((s, r_sq.sqrt()));
    }
    if samples.is_empty() {
        return Ok(DissipativityReport {
            kappa: 0.0,
            k_rate: f64::INFINITY,
            satisfied: true,
            n_pairs,
            radius,
            multiplicative: sigma_hs.is_some(),
        });
    }

    let k_at = |kappa: f64| -> f64 {
        samples
            .iter()
            .map(|&(s, r)| (kappa * r - s) / (r * r))
            .fold(f64::INFINITY, f64::min)
    };

    let multiplicative = sigma_hs.is_some();
    let mut kappa = 0.0;
    let mut k = k_at(0.0);
    if k <= 0.0 && !multiplicative {
        // Geometric κ-grid scaled by the worst observed violation.
        let scale = samples
            .iter()
            .map(|&(s, r)| s.max(0.0) / r)
            .fold(0.0f64, f64::max)
            .max(1e-6);
        for mult in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let cand = scale * mult;
            let kk = k_at(cand);
            if kk > 0.0 {
                kappa = cand;
                k = kk;
                break;
            }
        }
    }
    Ok(DissipativityReport {
        kappa,
        k_rate: k,
        satisfied: k > 0.0,
        n_pairs,
        radius,
        multiplicative,
    })
}

/// Fit the dissipativity constants of a model by pair sampling; the
/// Hilbert–Schmidt σ-difference term enters automatically for the
/// state-dependent-σ family.
pub fn check_dissipativity(
    model: &ModelSpec,
    n_pairs: usize,
    radius: f64,
    stream: &mut NoiseStream,
) -> Result<DissipativityReport> {
    let d = model.dim();
    let drift = |x: &[f64], out: &mut [f64]| model.drift_into(x, out);
    if model.is_sigma_constant() {
        fit_dissipativity(d, drift, None, n_pairs, radius, stream)
    } else {
        let hs = |x: &[f64], y: &[f64]| {
            let sx = model.sigma().matrix(x);
            let sy = model.sigma().matrix(y);
            (sx - sy).norm_squared()
        };
        fit_dissipativity(d, drift, Some(&hs), n_pairs, radius, stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_ou, reversible_ou, rotated_ou, rotated_tanh};
    use nalgebra::DMatrix;

    #[test]
    fn em_step_zero_drift_identity_sigma() {
        // x=(0,0), B≡0 surrogate: use reversible OU with beta→ tiny? Build a
        // genuine zero-drift step by hand instead: drift·h = 0 via h→0 is not
        // exact, so check the additive structure on the rotated model with
        // dw = 0 and a pure-noise step separately.
        let model = rotated_ou(1.0, 1.0).unwrap();
        // dw = (0.3, −0.1) at x = 0: drift vanishes at the origin, so the
        // update is exactly σ·dw = dw.
        let mut out = [0.0; 2];
        em_step(&model, &[0.0, 0.0], &[0.3, -0.1], 0.01, &mut out).unwrap();
        assert_eq!(out, [0.3, -0.1]);
    }

    #[test]
    fn em_step_matches_update_rule() {
        // 1-d OU: x=1, B(x)=−x, σ=1, dw=0, h=0.1 → 0.9
        let model = reversible_ou(1.0, 1).unwrap();
        let mut out = [0.0];
        em_step(&model, &[1.0], &[0.0], 0.1, &mut out).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-15);

        // rotated OU at (1,0), dw=0, h=0.1 → (0.9, −0.1)
        let model = rotated_ou(1.0, 1.0).unwrap();
        let mut out = [0.0; 2];
        em_step(&model, &[1.0, 0.0], &[0.0, 0.0], 0.1, &mut out).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-15);
        assert!((out[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn em_step_dimension_mismatch() {
        let model = rotated_ou(1.0, 1.0).unwrap();
        let mut out = [0.0; 2];
        assert!(matches!(
            em_step(&model, &[1.0], &[0.0, 0.0], 0.1, &mut out),
            Err(EprError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn reversed_drift_cases() {
        // Reversible model: σσ*∇log ρ − B = 2B − B = B at every point.
        let model = reversible_ou(1.3, 2).unwrap();
        for x in [[0.7, -0.2], [3.0, 1.0]] {
            let rev = reversed_drift(&model, &x).unwrap();
            let mut b = [0.0; 2];
            model.drift_into(&x, &mut b);
            assert!((rev[0] - b[0]).abs() < 1e-12 && (rev[1] - b[1]).abs() < 1e-12);
        }
        // Linear model at x = 0.
        let model = rotated_ou(1.0, 1.0).unwrap();
        let rev = reversed_drift(&model, &[0.0, 0.0]).unwrap();
        assert_eq!(rev, vec![0.0, 0.0]);
        // Rotated OU at (1,0): (−2,0) − (−1,−1) = (−1,1).
        let rev = reversed_drift(&model, &[1.0, 0.0]).unwrap();
        assert!((rev[0] + 1.0).abs() < 1e-12 && (rev[1] - 1.0).abs() < 1e-12);
        // Cross-check against −(A + βI)x.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let minus = -(&a + DMatrix::identity(2, 2));
        for x in [[1.0, 0.0], [0.4, -1.1]] {
            let rev = reversed_drift(&model, &x).unwrap();
            let want = &minus * nalgebra::DVector::from_column_slice(&x);
            assert!((rev[0] - want[0]).abs() < 1e-12 && (rev[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_path() {
        let model = rotated_ou(1.0, 1.0).unwrap();
        let cfg = PathConfig::new(0.5, 0.5, 1, 0);
        let summary = simulate_path(&model, &[0.0, 0.0], &cfg, &mut NoopObserver).unwrap();
        assert_eq!(summary.steps, 1);
        assert_eq!(summary.realized_t, 0.5);
    }

    #[test]
    fn paths_are_bit_reproducible() {
        let model = rotated_ou(1.0, 1.0).unwrap();
        let cfg = PathConfig::new(1e-2, 10.0, 99, 3).with_burn_in(1.0);
        let a = simulate_path(&model, &[1.0, 2.0], &cfg, &mut NoopObserver).unwrap();
        let b = simulate_path(&model, &[1.0, 2.0], &cfg, &mut NoopObserver).unwrap();
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.max_norm, b.max_norm);
    }

    #[test]
    fn rounding_policy_records_realized_horizon() {
        let cfg = PathConfig::new(0.3, 1.0, 0, 0);
        assert_eq!(cfg.steps(), 3);
        assert!((cfg.realized_t() - 0.9).abs() < 1e-15);
    }

    struct MeanSquare {
        acc: f64,
        n: usize,
    }
    impl PathObserver for MeanSquare {
        fn observe(&mut self, _t: f64, x: &[f64], _dw: &[f64]) {
            self.acc += x.iter().map(|v| v * v).sum::<f64>();
            self.n += 1;
        }
    }

    #[test]
    fn rotated_ou_time_average_of_norm_squared() {
        // μ(|x|²) = d/(2β) = 1 for the rotated OU at β = 1, d = 2. Long-run
        // variance of the |x|² time average is 1/T (exact OU covariance), so
        // the 3σ band at T = 90 observed units is 3/√90 ≈ 0.32.
        let model = rotated_ou(1.0, 1.0).unwrap();
        let cfg = PathConfig::new(1e-2, 100.0, 7, 0).with_burn_in(10.0);
        let mut obs = MeanSquare { acc: 0.0, n: 0 };
        // start at the mode and let burn-in relax the law
        simulate_path(&model, &[0.0, 0.0], &cfg, &mut obs).unwrap();
        let avg = obs.acc / obs.n as f64;
        assert!((avg - 1.0).abs() < 0.32, "time average {avg}");
    }

    #[test]
    fn overflow_reports_step_index() {
        // Anti-dissipative drift by construction is impossible through the
        // public builders, so force overflow with a huge step instead.
        let model = rotated_ou(1.0, 1.0).unwrap();
        let cfg = PathConfig::new(1e300, 1e302, 1, 0);
        let err = simulate_path(&model, &[1.0, 1.0], &cfg, &mut NoopObserver).unwrap_err();
        match err {
            EprError::NonFinite { last_finite, .. } => {
                assert!(last_finite.iter().all(|v| v.is_finite()));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn dissipativity_linear_cases() {
        let mut stream = NoiseStream::new(4, 0);
        // B(x) = −x: κ = 0, K = 1 exactly on every pair.
        let rep = check_dissipativity(&reversible_ou(1.0, 2).unwrap(), 2000, 3.0, &mut stream)
            .unwrap();
        assert_eq!(rep.kappa, 0.0);
        assert!(rep.satisfied);
        assert!((rep.k_rate - 1.0).abs() < 1e-12);

        // Rotated OU: ⟨A Δx, Δx⟩ = 0 by antisymmetry, so K = β to 1e−12.
        let rep = check_dissipativity(&rotated_ou(1.0, 1.0).unwrap(), 2000, 3.0, &mut stream)
            .unwrap();
        assert!((rep.k_rate - 1.0).abs() < 1e-12);
        assert_eq!(rep.kappa, 0.0);
    }

    #[test]
    fn dissipativity_matches_symmetric_part_eigenvalue() {
        // For a linear drift Mx the tight K is −λ_max((M+M*)/2).
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 0.4, 0.1, -2.0]);
        let model = linear_ou("gen", m.clone(), DMatrix::identity(2, 2)).unwrap();
        let mut stream = NoiseStream::new(8, 0);
        let rep = check_dissipativity(&model, 4000, 5.0, &mut stream).unwrap();
        let sym = (&m + m.transpose()) * 0.5;
        let want = -sym.symmetric_eigenvalues().max();
        // sampled minimum over pairs upper-bounds the true K and converges
        // onto it; the Rayleigh quotient is attained only in the worst
        // direction, so allow a small one-sided gap.
        assert!(rep.k_rate >= want - 1e-10);
        assert!(rep.k_rate - want < 0.05, "fitted {} vs {}", rep.k_rate, want);
    }

    #[test]
    fn dissipativity_kappa_branch_for_bounded_perturbation() {
        // B(x) = −x + 2cos(x): needs κ > 0 but remains dissipative.
        let drift = |x: &[f64], out: &mut [f64]| {
            out[0] = -x[0] + 2.0 * x[0].cos();
        };
        let mut stream = NoiseStream::new(12, 0);
        let rep = fit_dissipativity(1, drift, None, 4000, 4.0, &mut stream).unwrap();
        assert!(rep.satisfied, "{rep:?}");
        assert!(rep.kappa > 0.0);
        assert!(rep.k_rate > 0.0);
    }

    #[test]
    fn dissipativity_multiplicative_uses_hs_term() {
        let model = rotated_tanh(1.0, 2.0, 1.0, 0.2, 0.5).unwrap();
        let mut stream = NoiseStream::new(3, 0);
        let rep = check_dissipativity(&model, 3000, 3.0, &mut stream).unwrap();
        assert!(rep.multiplicative);
        assert!(rep.satisfied, "tanh family at beta=2 should satisfy (4.2): {rep:?}");
    }

    #[test]
    fn weak_order_first_order_in_h() {
        // The EM chain for the 1-d OU has analytic stationary variance
        // 1/(2−h); the discretization error 1/(2−h) − 1/2 scales linearly in
        // h (ratio 10 between h = 1e−2 and h = 1e−3, up to O(h)).
        let err = |h: f64| 1.0 / (2.0 - h) - 0.5;
        let ratio = err(1e-2) / err(1e-3);
        assert!((ratio - 10.0).abs() < 0.1, "ratio {ratio}");

        // Monte Carlo leg: a long path at h = 1e−2 tracks the chain's own
        // stationary variance within 3 standard errors (long-run variance of
        // the x² average is ≈ 1/(2β²T) ⇒ se ≈ √(0.5/T)).
        let model = reversible_ou(1.0, 1).unwrap();
        let t_end = 2e5;
        let cfg = PathConfig::new(1e-2, t_end, 21, 0).with_burn_in(5.0);
        let mut obs = MeanSquare { acc: 0.0, n: 0 };
        simulate_path(&model, &[0.0], &cfg, &mut obs).unwrap();
        let avg = obs.acc / obs.n as f64;
        let se = (0.5 / t_end).sqrt();
        assert!(
            (avg - 1.0 / (2.0 - 1e-2)).abs() < 3.0 * se,
            "avg {avg}, want {} ± {}",
            1.0 / (2.0 - 1e-2),
            3.0 * se
        );
    }
}
