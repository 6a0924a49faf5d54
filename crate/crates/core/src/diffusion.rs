//! Diffusion estimation from empirical quadratic variations.
//!
//! For each trajectory `Q^(m) = Σ_l Δy_l Δy_lᵀ`. For a constant `Σ̃` the
//! loss `(1/M) Σ_m ‖Q^(m) − Σ̃ T‖²_F` is minimized by `mean(Q) / T`, which is
//! then projected onto the PSD cone by clipping eigenvalues at zero; `σ̂` is
//! the spectral square root `U √D Uᵀ`.
//!
//! Raw increments carry an `O(Δt)` bias `Σ_l g g ᵀ Δt²` from the drift. When a
//! fitted drift is available the increments can be compensated,
//! `Δy_l − ĝ(z_l) Δt_l`, which removes it.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisLibrary, SparseRow};
use crate::drift::{DriftEstimate, FeatureFn, FitDiagnostics};
use crate::error::{Error, Result};
use crate::lstsq::{assemble, FitOptions, NormalEquations};
use crate::simulate::TrajectoryEnsemble;
use crate::system::{max_asymmetry, MatrixMap};

pub const SQRT_SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues down to `-NEGATIVE_EIG_TOL · max(1, λ_max)` are clipped to zero.
pub const NEGATIVE_EIG_TOL: f64 = 1e-12;
/// Compensated increments carrying less than this fraction of the raw
/// increment energy are treated as pure rounding: the noise is degenerate.
pub const DEGENERATE_RATIO: f64 = 1e-16;

/// Drift applied to full states, writing the `y`-block drift.
pub type BlockDrift<'a> = &'a (dyn Fn(&[f64], &mut [f64]) + Send + Sync);

/// Source of the `y` increments fed to the quadratic variation.
#[derive(Clone, Copy)]
pub enum Increments<'a> {
    Raw,
    /// `Δy − ĝ(z) Δt` for the given `y`-drift on full states.
    Compensated(BlockDrift<'a>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticVariationRecord {
    pub per_trajectory: Vec<DMatrix<f64>>,
    pub horizon: f64,
    /// `Σ_m Σ_l ‖Δy_l‖²` of the uncompensated increments.
    pub raw_energy: f64,
}

impl QuadraticVariationRecord {
    pub fn mean(&self) -> DMatrix<f64> {
        let dy = self.per_trajectory.first().map_or(0, |q| q.nrows());
        let mut acc = DMatrix::zeros(dy, dy);
        for q in &self.per_trajectory {
            acc += q;
        }
        acc / self.per_trajectory.len().max(1) as f64
    }
}

fn increments_into(
    ens: &TrajectoryEnsemble,
    m: usize,
    l: usize,
    source: Increments,
    drift: &mut [f64],
    out: &mut [f64],
) {
    let dx = ens.dims.x;
    let (z, z1) = (ens.state(m, l), ens.state(m, l + 1));
    for (j, o) in out.iter_mut().enumerate() {
        *o = z1[dx + j] - z[dx + j];
    }
    if let Increments::Compensated(g) = source {
        g(z, drift);
        let dt = ens.dt_at(l);
        for (o, g) in out.iter_mut().zip(drift.iter()) {
            *o -= g * dt;
        }
    }
}

/// `Q^(m) = Σ_l Δy_l Δy_lᵀ` from the raw `y` increments.
pub fn empirical_qv(ensemble: &TrajectoryEnsemble) -> QuadraticVariationRecord {
    qv_with(ensemble, Increments::Raw)
}

pub fn qv_with(ensemble: &TrajectoryEnsemble, source: Increments) -> QuadraticVariationRecord {
    use rayon::prelude::*;
    let dy = ensemble.dims.y;
    let dx = ensemble.dims.x;
    let per_trajectory = (0..ensemble.n_trajectories)
        .into_par_iter()
        .map(|m| {
            let mut q = DMatrix::zeros(dy, dy);
            let mut inc = vec![0.0; dy];
            let mut drift = vec![0.0; dy];
            let mut raw = 0.0;
            for l in 0..ensemble.n_times() - 1 {
                increments_into(ensemble, m, l, source, &mut drift, &mut inc);
                let (z, z1) = (ensemble.state(m, l), ensemble.state(m, l + 1));
                raw += z[dx..].iter().zip(&z1[dx..]).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
                for a in 0..dy {
                    for b in a..dy {
                        q[(a, b)] += inc[a] * inc[b];
                    }
                }
            }
            for a in 0..dy {
                for b in 0..a {
                    q[(a, b)] = q[(b, a)];
                }
            }
            (q, raw)
        })
        .collect::<Vec<_>>();
    let raw_energy = per_trajectory.iter().map(|(_, r)| r).sum();
    QuadraticVariationRecord {
        per_trajectory: per_trajectory.into_iter().map(|(q, _)| q).collect(),
        horizon: ensemble.horizon(),
        raw_energy,
    }
}

/// Symmetric PSD square root `U √D Uᵀ`.
pub fn matrix_sqrt_psd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sigma.is_square() {
        return Err(Error::Contract("square root of a non-square matrix".into()));
    }
    let asym = max_asymmetry(sigma);
    if asym > SQRT_SYMMETRY_TOL {
        return Err(Error::NonSymmetric { asymmetry: asym });
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let tol = NEGATIVE_EIG_TOL * lmax.max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -tol) {
        return Err(Error::Contract("matrix is not positive semidefinite".into()));
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = eig.eigenvalues.map(|l| l.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantDiffusion {
    /// `Σ̂`, symmetric PSD.
    #[serde(with = "crate::matrix_rows")]
    pub sigma_cov: DMatrix<f64>,
    /// `σ̂ = Σ̂^{1/2}`.
    #[serde(with = "crate::matrix_rows")]
    pub sigma: DMatrix<f64>,
    /// Set when every quadratic variation was zero, or when drift
    /// compensation left only rounding residue.
    pub degenerate: bool,
}

/// Diagonal `Σ̂(y)` with one basis expansion per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalDiffusion {
    /// Outputs the `D_y` diagonal variances; inputs are the `y`-block.
    pub variance: DriftEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_class", rename_all = "snake_case")]
pub enum DiffusionEstimate {
    ConstantMatrix(ConstantDiffusion),
    DiagonalStateDependent(DiagonalDiffusion),
}

impl DiffusionEstimate {
    pub fn dim(&self) -> usize {
        match self {
            DiffusionEstimate::ConstantMatrix(c) => c.sigma_cov.nrows(),
            DiffusionEstimate::DiagonalStateDependent(d) => d.variance.output_dim,
        }
    }

    pub fn constant_covariance(&self) -> Option<&DMatrix<f64>> {
        match self {
            DiffusionEstimate::ConstantMatrix(c) => Some(&c.sigma_cov),
            DiffusionEstimate::DiagonalStateDependent(_) => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, DiffusionEstimate::ConstantMatrix(c) if c.degenerate)
    }

    /// Diagonal of `Σ̂(y)`, negative predictions clipped to zero.
    pub fn variance_diagonal_into(&self, y: &[f64], out: &mut [f64]) {
        match self {
            DiffusionEstimate::ConstantMatrix(c) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = c.sigma_cov[(i, i)];
                }
            }
            DiffusionEstimate::DiagonalStateDependent(d) => {
                d.variance.evaluate_into(y, &mut SparseRow::default(), out);
                for o in out.iter_mut() {
                    *o = o.max(0.0);
                }
            }
        }
    }

    /// `σ̂(y)`.
    pub fn sigma_at(&self, y: &[f64]) -> DMatrix<f64> {
        match self {
            DiffusionEstimate::ConstantMatrix(c) => c.sigma.clone(),
            DiffusionEstimate::DiagonalStateDependent(d) => {
                let mut v = vec![0.0; d.variance.output_dim];
                self.variance_diagonal_into(y, &mut v);
                DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                    v.len(),
                    v.iter().map(|x| x.sqrt()),
                ))
            }
        }
    }

    /// Per-entry `σ̂` as printed in reports: square roots of the diagonal of
    /// `Σ̂` (at `y` for the state-dependent class).
    pub fn sigma_display(&self, y: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.variance_diagonal_into(y, &mut v);
        v.into_iter().map(f64::sqrt).collect()
    }

    pub fn into_sigma_map(self: Arc<Self>) -> MatrixMap {
        Arc::new(move |y: &[f64], out: &mut DMatrix<f64>| out.copy_from(&self.sigma_at(y)))
    }
}

/// Closed-form constant-`Σ̃` minimizer of the quadratic-variation loss.
pub fn fit_sigma_constant(qv: &QuadraticVariationRecord) -> Result<DiffusionEstimate> {
    if qv.per_trajectory.is_empty() {
        return Err(Error::Contract("no trajectories in quadratic-variation record".into()));
    }
    if !(qv.horizon > 0.0) {
        return Err(Error::Contract("horizon must be positive".into()));
    }
    let mean = qv.mean();
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quadratic variation"));
    }
    let energy: f64 = qv.per_trajectory.iter().map(|q| q.trace()).sum();
    let degenerate = qv.per_trajectory.iter().all(|q| q.iter().all(|&v| v == 0.0))
        || energy <= DEGENERATE_RATIO * qv.raw_energy;
    let sigma_cov = if degenerate {
        DMatrix::zeros(mean.nrows(), mean.ncols())
    } else {
        clip_psd(&(mean / qv.horizon))
    };
    let sigma = matrix_sqrt_psd(&sigma_cov)?;
    Ok(DiffusionEstimate::ConstantMatrix(ConstantDiffusion {
        sigma_cov,
        sigma,
        degenerate,
    }))
}

/// Diagonal state-dependent `Σ̂(y)` over a basis on the `y`-block.
pub fn fit_sigma_state_dependent(
    ensemble: &TrajectoryEnsemble,
    lib: BasisLibrary,
    options: &FitOptions,
) -> Result<DiffusionEstimate> {
    let dx = ensemble.dims.x;
    let select_y = move |z: &[f64], out: &mut [f64]| out.copy_from_slice(&z[dx..]);
    fit_sigma_state_dependent_with(ensemble, &select_y, lib, Increments::Raw, options)
}

/// Regresses the per-step `(Δy_j)² / Δt` on `lib ∘ feature`; `feature` must
/// map full states to the `y`-block coordinates the library expects.
pub fn fit_sigma_state_dependent_with(
    ensemble: &TrajectoryEnsemble,
    feature: FeatureFn,
    lib: BasisLibrary,
    source: Increments,
    options: &FitOptions,
) -> Result<DiffusionEstimate> {
    let dy = ensemble.dims.y;
    if lib.dims_in() != dy {
        return Err(Error::DimensionMismatch {
            block: "diffusion basis input",
            expected: dy,
            got: lib.dims_in(),
        });
    }
    let p = lib.n_total();
    let fill = |m: usize, ne: &mut NormalEquations| {
        let mut feat = vec![0.0; dy];
        let mut row = SparseRow::default();
        let mut inc = vec![0.0; dy];
        let mut drift = vec![0.0; dy];
        let mut target = vec![0.0; dy];
        for l in 0..ensemble.n_times() - 1 {
            feature(ensemble.state(m, l), &mut feat);
            lib.eval_sparse(&feat, &mut row);
            increments_into(ensemble, m, l, source, &mut drift, &mut inc);
            let dt = ensemble.dt_at(l);
            for (t, i) in target.iter_mut().zip(&inc) {
                *t = i * i / dt;
            }
            ne.add(&row, &target, None);
        }
    };
    let ne = assemble(ensemble.n_trajectories, p, dy, true, fill).finish();
    let coefficients = ne.solve(options)?;
    let diagnostics = FitDiagnostics {
        rows: ne.rows,
        gradient_norm: ne.gradient_norm(&coefficients),
    };
    Ok(DiffusionEstimate::DiagonalStateDependent(DiagonalDiffusion {
        variance: DriftEstimate {
            library: lib,
            coefficients,
            output_dim: dy,
            options: *options,
            diagnostics,
        },
    }))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::simulate::{simulate_ensemble, SimulationConfig};
    use crate::system::{diagonal_sigma, zero_map, InitialDistribution, ModelSystem, SystemDimensions};

    fn brownian(sigma: f64, m: usize, seed: u64) -> TrajectoryEnsemble {
        let dims = SystemDimensions::identity_features(1, 1).unwrap();
        let model = ModelSystem::new(dims, zero_map(), zero_map(), diagonal_sigma(&[sigma])).unwrap();
        simulate_ensemble(
            &model,
            &SimulationConfig {
                horizon: 1.0,
                dt: 0.001,
                n_trajectories: m,
                seed,
                initial: InitialDistribution::unit_box(2),
            },
        )
        .unwrap()
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-15);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let r = matrix_sqrt_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);
    }

    #[test]
    fn sqrt_of_random_spd_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let b = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
            let a = &b * b.transpose();
            let r = matrix_sqrt_psd(&a).unwrap();
            let err = (&r * &r - &a).norm() / a.norm();
            assert!(err < 1e-10, "{err}");
            assert!((&r - r.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn sqrt_rejects_asymmetric_and_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&a), Err(Error::NonSymmetric { .. })));
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matrix_sqrt_psd(&a).is_err());
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-14]);
        let r = matrix_sqrt_psd(&tiny).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
    }

    #[test]
    fn constant_path_has_zero_qv_and_degenerate_flag() {
        let ens = brownian(0.0, 3, 1);
        let qv = empirical_qv(&ens);
        assert!(qv.per_trajectory.iter().all(|q| q.amax() == 0.0));
        let est = fit_sigma_constant(&qv).unwrap();
        assert!(est.is_degenerate());
        assert_eq!(est.sigma_display(&[0.0]), vec![0.0]);
    }

    #[test]
    fn brownian_qv_mean_matches_sigma_squared_t() {
        let m = 400;
        let ens = brownian(0.1, m, 5);
        let qv = empirical_qv(&ens);
        let vals: Vec<f64> = qv.per_trajectory.iter().map(|q| q[(0, 0)]).collect();
        let mean = vals.iter().sum::<f64>() / m as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
        assert!((mean - 0.01).abs() < 3.0 * sd / (m as f64).sqrt());
    }

    #[test]
    fn constant_sigma_is_psd_and_consistent() {
        let est = fit_sigma_constant(&empirical_qv(&brownian(0.1, 200, 9))).unwrap();
        let DiffusionEstimate::ConstantMatrix(c) = &est else { panic!() };
        let err = (&c.sigma * c.sigma.transpose() - &c.sigma_cov).norm() / c.sigma_cov.norm();
        assert!(err < 1e-10);
        assert!((c.sigma[(0, 0)] - 0.1).abs() < 0.001);
    }

    #[test]
    fn zero_noise_state_dependent_is_zero() {
        let ens = brownian(0.0, 4, 2);
        let lib = BasisLibrary::new(vec![crate::basis::BasisSpec1D::bspline(-1.0, 2.0, 3, 1).unwrap()]).unwrap();
        let est = fit_sigma_state_dependent(&ens, lib, &FitOptions::default()).unwrap();
        assert_eq!(est.sigma_display(&[0.5]), vec![0.0]);
    }
}
