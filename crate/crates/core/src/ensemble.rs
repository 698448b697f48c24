//! Deterministic replica ensembles.
//!
//! Replica i draws everything (initial condition, then path) from the
//! stream `(seed, stream_offset + i)`, and results are collected in replica
//! order, so the outputs are bit-identical across runs and across any
//! worker count. With the `parallel` feature the map runs on rayon.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::epr::{EprObserver, FunctionalSample, TrajectoryRecord};
use crate::error::{EprError, Result};
use crate::model::ModelSpec;
use crate::noise::NoiseStream;
use crate::sde::{simulate_path_with_stream, PathConfig};

/// Initial law of the ensemble paths.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum InitialLaw {
    /// Exact draw from the model's stationary Gaussian μ.
    Stationary,
    /// Point mass at x0 (the Theorem-1.2 regime; no burn-in).
    Dirac { x0: Vec<f64> },
    /// N(mean, cov) with a user-specified covariance.
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

/// Initial sampler with the Gaussian factorization done once.
enum PreparedInit {
    Stationary,
    Dirac(Vec<f64>),
    Gaussian { mean: Vec<f64>, chol: DMatrix<f64> },
}

impl PreparedInit {
    fn prepare(law: &InitialLaw, model: &ModelSpec) -> Result<Self> {
        let d = model.dim();
        match law {
            InitialLaw::Stationary => Ok(PreparedInit::Stationary),
            InitialLaw::Dirac { x0 } => {
                if x0.len() != d {
                    return Err(EprError::DimensionMismatch { expected: d, got: x0.len() });
                }
                Ok(PreparedInit::Dirac(x0.clone()))
            }
            InitialLaw::Gaussian { mean, cov } => {
                if mean.len() != d || cov.len() != d || cov.iter().any(|r| r.len() != d) {
                    return Err(EprError::DimensionMismatch { expected: d, got: mean.len() });
                }
                let mat = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
                let chol = mat
                    .cholesky()
                    .ok_or_else(|| EprError::Config("initial covariance must be PD".into()))?
                    .l();
                Ok(PreparedInit::Gaussian { mean: mean.clone(), chol })
            }
        }
    }

    fn draw(&self, model: &ModelSpec, stream: &mut NoiseStream, out: &mut [f64]) {
        match self {
            PreparedInit::Stationary => model.sample_stationary(stream, out),
            PreparedInit::Dirac(x0) => out.copy_from_slice(x0),
            PreparedInit::Gaussian { mean, chol } => {
                let d = out.len();
                let mut z = vec![0.0; d];
                for zi in z.iter_mut() {
                    *zi = stream.next_standard_normal();
                }
                for i in 0..d {
                    let mut acc = mean[i];
                    for j in 0..=i {
                        acc += chol[(i, j)] * z[j];
                    }
                    out[i] = acc;
                }
            }
        }
    }
}

/// Map replica indices to values, preserving replica order in the output
/// regardless of execution order.
#[cfg(feature = "parallel")]
pub fn replica_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn replica_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Replica-indexed collection of finalized samples sharing one horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub t: f64,
    pub samples: Vec<FunctionalSample>,
    pub seed: u64,
    pub stream_offset: u64,
}

impl EnsembleStats {
    pub fn new(t: f64, samples: Vec<FunctionalSample>, seed: u64, stream_offset: u64) -> Result<Self> {
        if samples.iter().any(|s| s.t != t) {
            return Err(EprError::Config("ensemble samples must share one horizon".into()));
        }
        Ok(Self { t, samples, seed, stream_offset })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn s_values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.s_t).collect()
    }

    pub fn r_values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.r_t).collect()
    }
}

/// Ensemble run parameters. `t_grid` must be increasing; one
/// [`EnsembleStats`] is produced per grid point, all extracted from the
/// same replica paths run to the last horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleRunConfig {
    pub t_grid: Vec<f64>,
    pub h: f64,
    pub burn_in: f64,
    pub replicas: usize,
    pub seed: u64,
    pub stream_offset: u64,
    /// Centering R for models without a closed form.
    pub supplied_r: Option<f64>,
}

impl EnsembleRunConfig {
    pub fn new(t_grid: Vec<f64>, h: f64, replicas: usize, seed: u64) -> Self {
        Self {
            t_grid,
            h,
            burn_in: 0.0,
            replicas,
            seed,
            stream_offset: 0,
            supplied_r: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.t_grid.is_empty() {
            return Err(EprError::Config("empty horizon grid".into()));
        }
        if self.t_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(EprError::Config("horizon grid must strictly increase".into()));
        }
        if self.replicas == 0 {
            return Err(EprError::Config("replica count must be at least 1".into()));
        }
        Ok(())
    }
}

fn run_replicas(
    model: &ModelSpec,
    law: &InitialLaw,
    cfg: &EnsembleRunConfig,
    checkpoint_times: &[f64],
) -> Result<Vec<Vec<FunctionalSample>>> {
    cfg.validate()?;
    let prepared = PreparedInit::prepare(law, model)?;
    let mu = crate::epr::resolve_mu_psi_sq(model, cfg.supplied_r)?;
    let t_end = *checkpoint_times.last().unwrap();
    let path_cfg = PathConfig::new(cfg.h, t_end, cfg.seed, 0).with_burn_in(cfg.burn_in);
    path_cfg.validate()?;

    let results: Vec<Result<Vec<FunctionalSample>>> = replica_map(cfg.replicas, |i| {
        let mut stream = NoiseStream::new(cfg.seed, cfg.stream_offset + i as u64);
        let mut x0 = vec![0.0; model.dim()];
        prepared.draw(model, &mut stream, &mut x0);
        let mut cfg_i = path_cfg.clone();
        cfg_i.stream_id = cfg.stream_offset + i as u64;
        let mut obs = EprObserver::new(model, cfg.h).with_checkpoints(checkpoint_times);
        let summary = simulate_path_with_stream(model, &x0, &cfg_i, &mut obs, &mut stream)?;
        obs.finish(summary.steps);
        Ok(obs.checkpoint_samples(mu))
    });
    results.into_iter().collect()
}

/// Run the ensemble and return one [`EnsembleStats`] per grid horizon.
pub fn run_epr_ensembles(
    model: &ModelSpec,
    law: &InitialLaw,
    cfg: &EnsembleRunConfig,
) -> Result<Vec<EnsembleStats>> {
    let per_replica = run_replicas(model, law, cfg, &cfg.t_grid)?;
    let n_t = cfg.t_grid.len();
    let mut out = Vec::with_capacity(n_t);
    for (j, &t) in cfg.t_grid.iter().enumerate() {
        let samples: Vec<FunctionalSample> =
            per_replica.iter().map(|reps| reps[j].clone()).collect();
        // checkpoint times were rounded onto the step grid
        let realized_t = samples.first().map(|s| s.t).unwrap_or(t);
        out.push(EnsembleStats::new(
            realized_t,
            samples,
            cfg.seed,
            cfg.stream_offset,
        )?);
    }
    Ok(out)
}

/// Convenience for a single horizon.
pub fn run_epr_ensemble(
    model: &ModelSpec,
    law: &InitialLaw,
    cfg: &EnsembleRunConfig,
) -> Result<EnsembleStats> {
    Ok(run_epr_ensembles(model, law, cfg)?.pop().expect("one horizon"))
}

/// Run the ensemble recording per-replica (t, S_t) trajectories on the
/// given checkpoint grid (used by the LIL scan).
pub fn run_trajectory_ensemble(
    model: &ModelSpec,
    law: &InitialLaw,
    cfg: &EnsembleRunConfig,
    checkpoint_times: &[f64],
) -> Result<Vec<TrajectoryRecord>> {
    cfg.validate()?;
    if checkpoint_times.is_empty() {
        return Err(EprError::Config("need at least one checkpoint".into()));
    }
    let prepared = PreparedInit::prepare(law, model)?;
    let mu = crate::epr::resolve_mu_psi_sq(model, cfg.supplied_r)?;
    let t_end = *checkpoint_times.last().unwrap();
    let path_cfg = PathConfig::new(cfg.h, t_end, cfg.seed, 0).with_burn_in(cfg.burn_in);
    path_cfg.validate()?;

    let results: Vec<Result<TrajectoryRecord>> = replica_map(cfg.replicas, |i| {
        let mut stream = NoiseStream::new(cfg.seed, cfg.stream_offset + i as u64);
        let mut x0 = vec![0.0; model.dim()];
        prepared.draw(model, &mut stream, &mut x0);
        let mut cfg_i = path_cfg.clone();
        cfg_i.stream_id = cfg.stream_offset + i as u64;
        let mut obs = EprObserver::new(model, cfg.h).with_checkpoints(checkpoint_times);
        let summary = simulate_path_with_stream(model, &x0, &cfg_i, &mut obs, &mut stream)?;
        obs.finish(summary.steps);
        let record = obs.trajectory_record(mu);
        record.validate()?;
        Ok(record)
    });
    results.into_iter().collect()
}
