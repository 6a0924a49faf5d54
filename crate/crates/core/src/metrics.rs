//! Performance measures for fitted models.
//!
//! * `L²(ρ)` drift error, with `ρ` the empirical occupation measure of an
//!   ensemble (every observed state, uniform weights).
//! * Paired-noise trajectory error between a reference ensemble and its replay
//!   under a fitted model.
//! * Wasserstein-2 distances between time marginals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::TrajectoryEnsemble;
use crate::system::{DriftWorkspace, ModelSystem};
use crate::wasserstein::{wasserstein2, W2Options, W2};

const REDUCE_CHUNK: usize = 4096;

/// Uniform empirical measure on all `M · L` observed states.
#[derive(Debug, Clone)]
pub struct OccupationMeasure<'a> {
    pub points: &'a [f64],
    pub dim: usize,
}

impl<'a> OccupationMeasure<'a> {
    pub fn from_ensemble(ens: &'a TrajectoryEnsemble) -> Self {
        OccupationMeasure {
            points: &ens.states,
            dim: ens.dims.total,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2RhoError {
    pub absolute: f64,
    /// `None` when the true drift vanishes on every sample.
    pub relative: Option<f64>,
}

/// `‖h − ĥ‖_{L²(ρ)}` and its ratio to `‖h‖_{L²(ρ)}`.
pub fn l2_rho_error<H, E>(true_h: H, est_h: E, out_dim: usize, rho: &OccupationMeasure) -> Result<L2RhoError>
where
    H: Fn(&[f64], &mut [f64]) + Sync,
    E: Fn(&[f64], &mut [f64]) + Sync,
{
    if rho.is_empty() {
        return Err(Error::Contract("empty occupation measure".into()));
    }
    let partial: Vec<(f64, f64)> = rho
        .points
        .par_chunks(REDUCE_CHUNK * rho.dim)
        .map(|chunk| {
            let mut h = vec![0.0; out_dim];
            let mut e = vec![0.0; out_dim];
            let (mut num, mut den) = (0.0, 0.0);
            for z in chunk.chunks_exact(rho.dim) {
                true_h(z, &mut h);
                est_h(z, &mut e);
                for (a, b) in h.iter().zip(&e) {
                    num += (a - b) * (a - b);
                    den += a * a;
                }
            }
            (num, den)
        })
        .collect();
    let (num, den) = partial.iter().fold((0.0, 0.0), |(n, d), (a, b)| (n + a, d + b));
    let w = rho.weight();
    let absolute = (num * w).sqrt();
    if !absolute.is_finite() {
        return Err(Error::NonFinite("L2(rho) error"));
    }
    let relative = (den > 0.0).then(|| absolute / (den * w).sqrt());
    Ok(L2RhoError { absolute, relative })
}

/// [`l2_rho_error`] between the full drifts `h` of two models.
pub fn l2_rho_error_models(truth: &ModelSystem, estimate: &ModelSystem, rho: &OccupationMeasure) -> Result<L2RhoError> {
    let n = truth.dims.total;
    if estimate.dims.total != n {
        return Err(Error::DimensionMismatch {
            block: "estimated drift",
            expected: n,
            got: estimate.dims.total,
        });
    }
    let drift = |model: &ModelSystem| {
        let model = model.clone();
        move |z: &[f64], out: &mut [f64]| model.drift_into(z, &mut DriftWorkspace::new(&model.dims), out)
    };
    l2_rho_error(drift(truth), drift(estimate), n, rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub mean: f64,
    pub std: f64,
    pub per_trajectory: Vec<f64>,
    /// `E[(1/T) ∫ ‖z_t − ẑ_t‖² dt]`, unnormalized.
    pub absolute: f64,
}

fn check_paired(a: &TrajectoryEnsemble, b: &TrajectoryEnsemble) -> Result<()> {
    if a.dims != b.dims || a.n_trajectories != b.n_trajectories || a.times != b.times {
        return Err(Error::Contract("ensembles differ in shape or time grid".into()));
    }
    if a.seed != b.seed {
        return Err(Error::Contract("ensembles were not driven by the same noise seed".into()));
    }
    Ok(())
}

/// Trapezoid weights on the grid, summing to `T`.
fn quadrature_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    (0..n)
        .map(|l| {
            let left = if l > 0 { times[l] - times[l - 1] } else { 0.0 };
            let right = if l + 1 < n { times[l + 1] - times[l] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Per-trajectory relative error
/// `e_m = [Σ_l w_l ‖z_l − ẑ_l‖² / Σ_l w_l ‖z_l‖²]^{1/2}` with trapezoid
/// weights `w_l`; where the reference path is identically zero the absolute
/// root-mean-square difference is used instead.
pub fn trajectory_error(reference: &TrajectoryEnsemble, replayed: &TrajectoryEnsemble) -> Result<TrajectoryError> {
    check_paired(reference, replayed)?;
    let w = quadrature_weights(&reference.times);
    let horizon = reference.horizon();
    let d = reference.dims.total;
    let pairs: Vec<(f64, f64)> = (0..reference.n_trajectories)
        .into_par_iter()
        .map(|m| {
            let (a, b) = (reference.trajectory(m), replayed.trajectory(m));
            let (mut num, mut den) = (0.0, 0.0);
            for (l, wl) in w.iter().enumerate() {
                for k in l * d..(l + 1) * d {
                    num += wl * (a[k] - b[k]) * (a[k] - b[k]);
                    den += wl * a[k] * a[k];
                }
            }
            let rel = if den > 0.0 { (num / den).sqrt() } else { (num / horizon).sqrt() };
            (rel, num / horizon)
        })
        .collect();
    let n = pairs.len() as f64;
    let per_trajectory: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mean = per_trajectory.iter().sum::<f64>() / n;
    let std = (per_trajectory.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    let absolute = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    if !mean.is_finite() {
        return Err(Error::NonFinite("trajectory error"));
    }
    Ok(TrajectoryError {
        mean,
        std,
        per_trajectory,
        absolute,
    })
}

/// Grid index nearest to `t`, accepted within half a step.
pub fn nearest_time_index(times: &[f64], t: f64) -> Result<usize> {
    let pos = times.partition_point(|&s| s < t);
    let candidates = [pos.saturating_sub(1), pos.min(times.len() - 1)];
    let l = candidates
        .into_iter()
        .min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()))
        .unwrap_or(0);
    let step = if l + 1 < times.len() {
        times[l + 1] - times[l]
    } else {
        times[l] - times[l - 1]
    };
    if (times[l] - t).abs() > 0.5 * step * (1.0 + 1e-9) {
        return Err(Error::Contract(format!(
            "snapshot time {t} is outside the grid [0, {}]",
            times[times.len() - 1]
        )));
    }
    Ok(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WassersteinPoint {
    pub time: f64,
    pub distance: f64,
    pub approximate: bool,
}

/// `W₂` between the time marginals of two ensembles at each snapshot.
pub fn wasserstein_curve(
    reference: &TrajectoryEnsemble,
    comparison: &TrajectoryEnsemble,
    snapshot_times: &[f64],
    opts: &W2Options,
) -> Result<Vec<WassersteinPoint>> {
    if reference.dims.total != comparison.dims.total {
        return Err(Error::DimensionMismatch {
            block: "comparison ensemble",
            expected: reference.dims.total,
            got: comparison.dims.total,
        });
    }
    snapshot_times
        .iter()
        .map(|&t| {
            let la = nearest_time_index(&reference.times, t)?;
            let lb = nearest_time_index(&comparison.times, t)?;
            let W2 { distance, approximate } = wasserstein2(
                &reference.snapshot(la),
                &comparison.snapshot(lb),
                reference.dims.total,
                opts,
            )?;
            Ok(WassersteinPoint {
                time: t,
                distance,
                approximate,
            })
        })
        .collect()
}

/// How the reported `W₂` couples the two ensembles.
pub const COUPLING_NOTE: &str =
    "unconstrained W2 between time marginals; both ensembles share initial conditions and recorded noise";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub relative_l2_rho: f64,
    pub absolute_l2_rho: f64,
    pub trajectory_error_mean: f64,
    pub trajectory_error_std: f64,
    pub trajectory_error_absolute: f64,
    pub wasserstein: Vec<WassersteinPoint>,
    pub coupling: String,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let values = [
            self.relative_l2_rho,
            self.absolute_l2_rho,
            self.trajectory_error_mean,
            self.trajectory_error_std,
            self.trajectory_error_absolute,
        ];
        if values
            .iter()
            .chain(self.wasserstein.iter().map(|w| &w.distance))
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::NonFinite("metric report"));
        }
        Ok(())
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "relative_l2_rho".to_string(),
            "trajectory_error_mean".into(),
            "trajectory_error_std".into(),
        ];
        cols.extend(self.wasserstein.iter().map(|w| format!("w2_t={}", w.time)));
        cols.join(",")
    }

    /// Values rounded to `digits` significant digits.
    pub fn csv_row(&self, digits: usize) -> String {
        let mut vals = vec![
            format_sig(self.relative_l2_rho, digits),
            format_sig(self.trajectory_error_mean, digits),
            format_sig(self.trajectory_error_std, digits),
        ];
        vals.extend(self.wasserstein.iter().map(|w| format_sig(w.distance, digits)));
        vals.join(",")
    }
}

/// Formats with `digits` significant digits (`0.1` → `0.1000`); fixed
/// notation unless the magnitude is tiny or huge.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.prec$}", prec = digits.saturating_sub(1));
    }
    let mag = v.abs().log10().floor() as i64;
    if !(-4..=15).contains(&mag) {
        return format!("{v:.prec$e}", prec = digits.saturating_sub(1));
    }
    let decimals = (digits as i64 - 1 - mag).clamp(0, 17) as usize;
    format!("{v:.decimals$}")
}
