//! Euler–Maruyama ensembles with recorded Brownian increments.
//!
//! Trajectory `m` draws its initial state and all of its increments from a
//! ChaCha8 stream selected by `(seed, m)`, so the ensemble does not depend on
//! how trajectories are scheduled across threads.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{max_asymmetry, DriftWorkspace, InitialDistribution, ModelSystem, SystemDimensions, SYMMETRY_TOL};

/// States with any component above this magnitude abort the trajectory.
pub const BLOW_UP_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Time horizon `T`.
    pub horizon: f64,
    pub dt: f64,
    pub n_trajectories: usize,
    pub seed: u64,
    pub initial: InitialDistribution,
}

impl SimulationConfig {
    /// Number of grid points `L = round(T/Δt) + 1`.
    pub fn n_times(&self) -> Result<usize> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::config("simulation.horizon", "must be positive"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("simulation.dt", "must be positive"));
        }
        let steps = (self.horizon / self.dt).round();
        if steps < 1.0 {
            return Err(Error::config("simulation.dt", "needs at least two time points"));
        }
        if (self.horizon - steps * self.dt).abs() > 1e-9 * self.horizon {
            return Err(Error::config(
                "simulation.dt",
                format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt),
            ));
        }
        Ok(steps as usize + 1)
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        let n = self.n_times()?;
        Ok((0..n).map(|l| l as f64 * self.dt).collect())
    }

    pub fn validate(&self, dims: &SystemDimensions) -> Result<()> {
        self.n_times()?;
        if self.n_trajectories == 0 {
            return Err(Error::config("simulation.n_trajectories", "must be positive"));
        }
        self.initial.validate(dims.total)
    }
}

/// `M` sample paths on a shared grid, stored row-major as `M × L × D`, with
/// the `M × (L−1) × D_y` Brownian increments that drove them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub dims: SystemDimensions,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub noise_increments: Vec<f64>,
    pub n_trajectories: usize,
    pub seed: u64,
    pub dt: f64,
}

impl TrajectoryEnsemble {
    /// Builds an ensemble from raw arrays, checking every shape.
    pub fn from_parts(
        dims: SystemDimensions,
        times: Vec<f64>,
        states: Vec<f64>,
        noise_increments: Vec<f64>,
        n_trajectories: usize,
        seed: u64,
        dt: f64,
    ) -> Result<Self> {
        dims.validate()?;
        let l = times.len();
        if l < 2 {
            return Err(Error::Contract("an ensemble needs at least two time points".into()));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Contract("times must start at 0 and increase strictly".into()));
        }
        if states.len() != n_trajectories * l * dims.total {
            return Err(Error::DimensionMismatch {
                block: "states",
                expected: n_trajectories * l * dims.total,
                got: states.len(),
            });
        }
        if noise_increments.len() != n_trajectories * (l - 1) * dims.y {
            return Err(Error::DimensionMismatch {
                block: "noise_increments",
                expected: n_trajectories * (l - 1) * dims.y,
                got: noise_increments.len(),
            });
        }
        Ok(TrajectoryEnsemble {
            dims,
            times,
            states,
            noise_increments,
            n_trajectories,
            seed,
            dt,
        })
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn dt_at(&self, l: usize) -> f64 {
        self.times[l + 1] - self.times[l]
    }

    pub fn trajectory(&self, m: usize) -> &[f64] {
        let len = self.n_times() * self.dims.total;
        &self.states[m * len..(m + 1) * len]
    }

    pub fn state(&self, m: usize, l: usize) -> &[f64] {
        let d = self.dims.total;
        let start = (m * self.n_times() + l) * d;
        &self.states[start..start + d]
    }

    pub fn initial_state(&self, m: usize) -> &[f64] {
        self.state(m, 0)
    }

    pub fn noise(&self, m: usize, l: usize) -> &[f64] {
        let dy = self.dims.y;
        let start = (m * (self.n_times() - 1) + l) * dy;
        &self.noise_increments[start..start + dy]
    }

    pub fn trajectory_noise(&self, m: usize) -> &[f64] {
        let len = (self.n_times() - 1) * self.dims.y;
        &self.noise_increments[m * len..(m + 1) * len]
    }

    /// All `M` states at grid index `l`, flattened `M × D`.
    pub fn snapshot(&self, l: usize) -> Vec<f64> {
        (0..self.n_trajectories)
            .flat_map(|m| self.state(m, l).iter().copied())
            .collect()
    }

    /// Iterator over every observed state `z_l^(m)`.
    pub fn all_states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dims.total)
    }

    /// Subset of trajectories in the given order.
    pub fn select(&self, indices: &[usize]) -> TrajectoryEnsemble {
        let mut states = Vec::with_capacity(indices.len() * self.n_times() * self.dims.total);
        let mut noise = Vec::with_capacity(indices.len() * (self.n_times() - 1) * self.dims.y);
        for &m in indices {
            states.extend_from_slice(self.trajectory(m));
            noise.extend_from_slice(self.trajectory_noise(m));
        }
        TrajectoryEnsemble {
            states,
            noise_increments: noise,
            n_trajectories: indices.len(),
            ..self.clone_header()
        }
    }

    /// Keeps every `stride`-th grid point. Noise increments between kept
    /// points are summed, so replay on the coarse grid sees the same paths.
    pub fn thin(&self, stride: usize) -> Result<TrajectoryEnsemble> {
        if stride == 0 {
            return Err(Error::Contract("stride must be positive".into()));
        }
        let l = self.n_times();
        let kept: Vec<usize> = (0..l).step_by(stride).collect();
        let times: Vec<f64> = kept.iter().map(|&i| self.times[i]).collect();
        let dy = self.dims.y;
        let mut states = Vec::with_capacity(self.n_trajectories * kept.len() * self.dims.total);
        let mut noise = Vec::with_capacity(self.n_trajectories * (kept.len() - 1) * dy);
        for m in 0..self.n_trajectories {
            for &i in &kept {
                states.extend_from_slice(self.state(m, i));
            }
            for w in kept.windows(2) {
                let mut acc = vec![0.0; dy];
                for j in w[0]..w[1] {
                    for (a, n) in acc.iter_mut().zip(self.noise(m, j)) {
                        *a += n;
                    }
                }
                noise.extend_from_slice(&acc);
            }
        }
        TrajectoryEnsemble::from_parts(
            self.dims,
            times,
            states,
            noise,
            self.n_trajectories,
            self.seed,
            self.dt * stride as f64,
        )
    }

    fn clone_header(&self) -> TrajectoryEnsemble {
        TrajectoryEnsemble {
            dims: self.dims,
            times: self.times.clone(),
            states: Vec::new(),
            noise_increments: Vec::new(),
            n_trajectories: 0,
            seed: self.seed,
            dt: self.dt,
        }
    }
}

/// Per-trajectory random stream.
pub fn trajectory_rng(seed: u64, m: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    rng
}

/// Integrates one path from `z0` driven by `noise` (length `(L−1)·D_y`),
/// writing `L·D` values into `out`.
fn integrate_path(
    model: &ModelSystem,
    z0: &[f64],
    times: &[f64],
    noise: &[f64],
    trajectory: usize,
    out: &mut [f64],
) -> Result<()> {
    let dims = &model.dims;
    let (d, dx, dy) = (dims.total, dims.x, dims.y);
    let mut ws = DriftWorkspace::new(dims);
    let mut h = vec![0.0; d];
    let mut sigma = DMatrix::zeros(dy, dy);
    out[..d].copy_from_slice(z0);
    check_finite(z0, trajectory, times[0])?;
    for l in 0..times.len() - 1 {
        let dt = times[l + 1] - times[l];
        let (head, tail) = out.split_at_mut((l + 1) * d);
        let z = &head[l * d..];
        let next = &mut tail[..d];
        model.drift_into(z, &mut ws, &mut h);
        for i in 0..dx {
            next[i] = z[i] + h[i] * dt;
        }
        (model.diffusion_sigma_y)(&z[dx..], &mut sigma);
        let asym = max_asymmetry(&sigma);
        if asym > SYMMETRY_TOL {
            return Err(Error::NonSymmetric { asymmetry: asym });
        }
        let dw = &noise[l * dy..(l + 1) * dy];
        for i in 0..dy {
            let mut s = 0.0;
            for j in 0..dy {
                s += sigma[(i, j)] * dw[j];
            }
            next[dx + i] = z[dx + i] + h[dx + i] * dt + s;
        }
        check_finite(next, trajectory, times[l + 1])?;
    }
    Ok(())
}

fn check_finite(z: &[f64], trajectory: usize, time: f64) -> Result<()> {
    if z.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_THRESHOLD) {
        return Err(Error::BlowUp { trajectory, time });
    }
    Ok(())
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect()
}

/// Generates `M` Euler–Maruyama paths of `model`.
pub fn simulate_ensemble(model: &ModelSystem, config: &SimulationConfig) -> Result<TrajectoryEnsemble> {
    model.dims.validate()?;
    config.validate(&model.dims)?;
    let times = config.times()?;
    let (n_t, d, dy) = (times.len(), model.dims.total, model.dims.y);
    let mut states = vec![0.0; config.n_trajectories * n_t * d];
    let mut noise = vec![0.0; config.n_trajectories * (n_t - 1) * dy];

    let results: Vec<Result<()>> = states
        .par_chunks_mut(n_t * d)
        .zip(noise.par_chunks_mut((n_t - 1) * dy))
        .enumerate()
        .map(|(m, (path, dw))| {
            let mut rng = trajectory_rng(config.seed, m);
            let z0 = config.initial.sample(&mut rng, d)?;
            for l in 0..n_t - 1 {
                let scale = (times[l + 1] - times[l]).sqrt();
                for w in &mut dw[l * dy..(l + 1) * dy] {
                    *w = scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
            integrate_path(model, &z0, &times, dw, m, path)
        })
        .collect();
    first_error(results)?;

    TrajectoryEnsemble::from_parts(
        model.dims,
        times,
        states,
        noise,
        config.n_trajectories,
        config.seed,
        config.dt,
    )
}

/// Re-integrates `model` from the reference initial states on the reference's
/// recorded increments.
pub fn replay_ensemble(model: &ModelSystem, reference: &TrajectoryEnsemble) -> Result<TrajectoryEnsemble> {
    if model.dims.x != reference.dims.x || model.dims.y != reference.dims.y {
        return Err(Error::Contract(format!(
            "model blocks ({}, {}) do not match ensemble blocks ({}, {})",
            model.dims.x, model.dims.y, reference.dims.x, reference.dims.y
        )));
    }
    let (n_t, d, dy) = (reference.n_times(), reference.dims.total, reference.dims.y);
    if reference.noise_increments.len() != reference.n_trajectories * (n_t - 1) * dy {
        return Err(Error::Contract("reference ensemble carries no noise record".into()));
    }
    let mut states = vec![0.0; reference.n_trajectories * n_t * d];
    let results: Vec<Result<()>> = states
        .par_chunks_mut(n_t * d)
        .enumerate()
        .map(|(m, path)| {
            integrate_path(
                model,
                reference.initial_state(m),
                &reference.times,
                reference.trajectory_noise(m),
                m,
                path,
            )
        })
        .collect();
    first_error(results)?;
    Ok(TrajectoryEnsemble {
        dims: reference.dims,
        times: reference.times.clone(),
        states,
        noise_increments: reference.noise_increments.clone(),
        n_trajectories: reference.n_trajectories,
        seed: reference.seed,
        dt: reference.dt,
    })
}
