//! Drift estimators `f̂` and `ĝ`.
//!
//! Both losses become linear least squares once `dx/dt` is replaced by the
//! forward difference `Δx_l / Δt_l` and the stochastic integral in the `g`
//! loss is taken at the left point:
//!
//! ```text
//! E_f(f̃) ∝ Σ_{m,l} ‖f̃(ξ_f(z_l)) − Δx_l/Δt_l‖² Δt_l
//! E_g(g̃) ∝ ½ Σ_{m,l} [⟨g̃, W⁻¹ g̃⟩ Δt_l − 2 ⟨g̃, W⁻¹ Δy_l⟩]
//! ```
//!
//! On a uniform grid the second is, up to a constant, the `W⁻¹`-weighted
//! squared distance between `g̃` and `Δy/Δt`. Each output column shares the
//! design; with a constant `W` the normal equations read `G C W⁻¹ = B W⁻¹`,
//! so the minimizer does not depend on `W` at all.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisLibrary, BoundingBox, SparseRow};
use crate::diffusion::DiffusionEstimate;
use crate::error::{Error, Result};
use crate::lstsq::{assemble, FitOptions, NormalEquations};
use crate::simulate::TrajectoryEnsemble;
use crate::system::VectorMap;

/// Eigenvalue floor applied to a diffusion estimate before it is inverted.
pub const WEIGHT_FLOOR: f64 = 1e-12;

pub type FeatureFn<'a> = &'a (dyn Fn(&[f64], &mut [f64]) + Send + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Number of regression samples.
    pub rows: usize,
    /// Norm of the gradient of the normalized loss at the solution.
    pub gradient_norm: f64,
}

/// A fitted drift: `coefficientsᵀ · φ(point)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEstimate<B = BasisLibrary> {
    pub library: B,
    /// `n_basis × output_dim`.
    #[serde(with = "crate::matrix_rows")]
    pub coefficients: DMatrix<f64>,
    pub output_dim: usize,
    pub options: FitOptions,
    #[serde(default)]
    pub diagnostics: FitDiagnostics,
}

impl<B: Basis> DriftEstimate<B> {
    pub fn evaluate(&self, point: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim];
        self.evaluate_into(point, &mut SparseRow::default(), &mut out);
        out
    }

    pub fn evaluate_into(&self, point: &[f64], row: &mut SparseRow, out: &mut [f64]) {
        self.library.eval_sparse(point, row);
        out.fill(0.0);
        for (i, v) in row.iter() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.coefficients[(i, j)] * v;
            }
        }
    }
}

impl<B: Basis + 'static> DriftEstimate<B> {
    /// Wraps the estimate as a model drift.
    pub fn into_map(self: Arc<Self>) -> VectorMap {
        Arc::new(move |p: &[f64], out: &mut [f64]| {
            self.evaluate_into(p, &mut SparseRow::default(), out)
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DriftFile {
    library: BasisLibrary,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    coefficients: Vec<Vec<f64>>,
    output_dim: usize,
    regularization: FitOptions,
    #[serde(default)]
    diagnostics: FitDiagnostics,
}

impl DriftEstimate<BasisLibrary> {
    pub fn to_json(&self) -> Result<String> {
        let file = DriftFile {
            bbox: self.library.bounding_box(),
            library: self.library.clone(),
            coefficients: crate::matrix_rows::to_rows(&self.coefficients),
            output_dim: self.output_dim,
            regularization: self.options,
            diagnostics: self.diagnostics,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: DriftFile = serde_json::from_str(text)?;
        let coefficients = crate::matrix_rows::from_rows(&f.coefficients)
            .map_err(|m| Error::Format(format!("drift coefficients: {m}")))?;
        if coefficients.nrows() != f.library.n_total() || coefficients.ncols() != f.output_dim {
            return Err(Error::Format("coefficient shape does not match library".into()));
        }
        Ok(DriftEstimate {
            library: f.library,
            coefficients,
            output_dim: f.output_dim,
            options: f.regularization,
            diagnostics: f.diagnostics,
        })
    }
}

/// Weight `W` in the `g` loss.
#[derive(Debug, Clone, Copy)]
pub enum DiffusionWeight<'a> {
    Identity,
    /// A constant symmetric positive definite `W`.
    Constant(&'a DMatrix<f64>),
    /// A fitted `Σ̂`, constant or diagonal state-dependent.
    Estimate(&'a DiffusionEstimate),
}

fn check_lib<B: Basis>(lib: &B, feature_dim: usize) -> Result<()> {
    if lib.dims_in() != feature_dim {
        return Err(Error::DimensionMismatch {
            block: "basis input",
            expected: feature_dim,
            got: lib.dims_in(),
        });
    }
    if lib.is_empty() {
        return Err(Error::Contract("empty basis".into()));
    }
    Ok(())
}

fn ensure_pd(w: &DMatrix<f64>, dy: usize) -> Result<()> {
    if w.shape() != (dy, dy) {
        return Err(Error::DimensionMismatch {
            block: "weight",
            expected: dy,
            got: w.nrows(),
        });
    }
    if crate::system::max_asymmetry(w) > 1e-10 || w.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(())
}

/// Which state block supplies the regression targets.
#[derive(Clone, Copy)]
enum Block {
    X,
    Y,
}

fn fit_block<B: Basis>(
    ens: &TrajectoryEnsemble,
    feature: FeatureFn,
    feature_dim: usize,
    lib: B,
    block: Block,
    weight: Option<&DiffusionEstimate>,
    options: &FitOptions,
) -> Result<DriftEstimate<B>> {
    check_lib(&lib, feature_dim)?;
    let dims = ens.dims;
    let (start, k) = match block {
        Block::X => (0, dims.x),
        Block::Y => (dims.x, dims.y),
    };
    let p = lib.len();
    let n_t = ens.n_times();
    let fill = |m: usize, ne: &mut NormalEquations| {
        let mut feat = vec![0.0; feature_dim];
        let mut row = SparseRow::default();
        let mut target = vec![0.0; k];
        let mut w = vec![1.0; k];
        for l in 0..n_t - 1 {
            let (z, z1) = (ens.state(m, l), ens.state(m, l + 1));
            let dt = ens.dt_at(l);
            feature(z, &mut feat);
            lib.eval_sparse(&feat, &mut row);
            for (j, t) in target.iter_mut().enumerate() {
                *t = (z1[start + j] - z[start + j]) / dt;
            }
            match weight {
                Some(est) => {
                    est.variance_diagonal_into(&z[dims.x..], &mut w);
                    for v in w.iter_mut() {
                        *v = 1.0 / v.max(WEIGHT_FLOOR);
                    }
                    ne.add(&row, &target, Some(&w));
                }
                None => ne.add(&row, &target, None),
            }
        }
    };
    let ne = assemble(ens.n_trajectories, p, k, weight.is_none(), fill).finish();
    let coefficients = ne.solve(options)?;
    let diagnostics = FitDiagnostics {
        rows: ne.rows,
        gradient_norm: ne.gradient_norm(&coefficients),
    };
    Ok(DriftEstimate {
        library: lib,
        coefficients,
        output_dim: k,
        options: *options,
        diagnostics,
    })
}

/// Fits `f̂` from the noise-free block.
pub fn fit_f<B: Basis>(
    ensemble: &TrajectoryEnsemble,
    feature_f: FeatureFn,
    lib: B,
    options: &FitOptions,
) -> Result<DriftEstimate<B>> {
    fit_block(ensemble, feature_f, ensemble.dims.feature_f, lib, Block::X, None, options)
}

/// Fits `ĝ` from the noisy block with weight `W⁻¹`.
pub fn fit_g<B: Basis>(
    ensemble: &TrajectoryEnsemble,
    feature_g: FeatureFn,
    lib: B,
    weight: DiffusionWeight,
    options: &FitOptions,
) -> Result<DriftEstimate<B>> {
    let dy = ensemble.dims.y;
    let field = match weight {
        DiffusionWeight::Identity => None,
        DiffusionWeight::Constant(w) => {
            ensure_pd(w, dy)?;
            None
        }
        DiffusionWeight::Estimate(est) => match est.constant_covariance() {
            Some(sigma) => {
                ensure_pd(&floor_eigenvalues(sigma, WEIGHT_FLOOR), dy)?;
                None
            }
            None => Some(est),
        },
    };
    fit_block(ensemble, feature_g, ensemble.dims.feature_g, lib, Block::Y, field, options)
}

/// Clips the spectrum of a symmetric matrix from below.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|l| l.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisConfig, BasisFamily, BasisSpec1D};
    use crate::simulate::{simulate_ensemble, SimulationConfig};
    use crate::system::{diagonal_sigma, identity_map, InitialDistribution, ModelSystem, SystemDimensions};

    fn toy(sigma: f64) -> ModelSystem {
        let dims = SystemDimensions::identity_features(1, 1).unwrap();
        ModelSystem::new(
            dims,
            Arc::new(|z: &[f64], o: &mut [f64]| o[0] = 0.4 * z[0] - 0.1 * z[0] * z[1]),
            Arc::new(|z: &[f64], o: &mut [f64]| o[0] = -0.8 * z[1] + 0.2 * z[0] * z[0]),
            diagonal_sigma(&[sigma]),
        )
        .unwrap()
    }

    fn ensemble(model: &ModelSystem, m: usize, seed: u64) -> TrajectoryEnsemble {
        simulate_ensemble(
            model,
            &SimulationConfig {
                horizon: 1.0,
                dt: 0.01,
                n_trajectories: m,
                seed,
                initial: InitialDistribution::unit_box(2),
            },
        )
        .unwrap()
    }

    fn quad_lib(ens: &TrajectoryEnsemble) -> BasisLibrary {
        BasisConfig::uniform(BasisFamily::Bspline, 2, 1, 2)
            .build_from_data(ens.all_states())
            .unwrap()
    }

    #[test]
    fn constant_drift_recovered() {
        let dims = SystemDimensions::identity_features(1, 1).unwrap();
        let model = ModelSystem::new(
            dims,
            Arc::new(|_: &[f64], o: &mut [f64]| o[0] = 0.7),
            Arc::new(|_: &[f64], o: &mut [f64]| o[0] = 0.0),
            diagonal_sigma(&[0.0]),
        )
        .unwrap();
        let ens = ensemble(&model, 10, 1);
        let lib = quad_lib(&ens);
        let est = fit_f(&ens, &*identity_map(), lib, &FitOptions::default()).unwrap();
        for z in ens.all_states().step_by(37) {
            assert!((est.evaluate(z)[0] - 0.7).abs() < 1e-10);
        }
    }

    #[test]
    fn noiseless_toy_g_is_in_span() {
        let ens = ensemble(&toy(0.0), 20, 2);
        let lib = quad_lib(&ens);
        let est = fit_g(&ens, &*identity_map(), lib, DiffusionWeight::Identity, &FitOptions::default()).unwrap();
        assert!(est.diagnostics.gradient_norm < 1e-8);
        // Euler data satisfy Δy/Δt = g(z_l) exactly
        for z in ens.all_states().step_by(11) {
            let g = -0.8 * z[1] + 0.2 * z[0] * z[0];
            assert!((est.evaluate(z)[0] - g).abs() < 1e-9);
        }
    }

    #[test]
    fn scalar_weights_do_not_move_argmin() {
        let ens = ensemble(&toy(0.1), 20, 3);
        let lib = quad_lib(&ens);
        let opts = FitOptions::default();
        let id = fit_g(&ens, &*identity_map(), lib.clone(), DiffusionWeight::Identity, &opts).unwrap();
        let w = DMatrix::from_element(1, 1, 0.0123);
        let scaled = fit_g(&ens, &*identity_map(), lib, DiffusionWeight::Constant(&w), &opts).unwrap();
        assert!((id.coefficients - scaled.coefficients).amax() < 1e-10);
    }

    #[test]
    fn non_pd_weight_is_rejected() {
        let ens = ensemble(&toy(0.1), 2, 3);
        let lib = quad_lib(&ens);
        let w = DMatrix::from_element(1, 1, -1.0);
        let err = fit_g(&ens, &*identity_map(), lib, DiffusionWeight::Constant(&w), &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite));
    }

    #[test]
    fn wrong_basis_dimension_is_rejected() {
        let ens = ensemble(&toy(0.1), 2, 3);
        let lib = BasisLibrary::new(vec![BasisSpec1D::bspline(0.0, 1.0, 2, 1).unwrap()]).unwrap();
        assert!(matches!(
            fit_f(&ens, &*identity_map(), lib, &FitOptions::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_coefficients_evaluate_to_zero() {
        let lib = BasisLibrary::new(vec![BasisSpec1D::bspline(0.0, 1.0, 2, 1).unwrap()]).unwrap();
        let est = DriftEstimate {
            coefficients: DMatrix::zeros(lib.n_total(), 2),
            library: lib,
            output_dim: 2,
            options: FitOptions::default(),
            diagnostics: FitDiagnostics::default(),
        };
        assert_eq!(est.evaluate(&[0.3]), vec![0.0, 0.0]);
    }

    #[test]
    fn json_round_trip() {
        let ens = ensemble(&toy(0.1), 4, 3);
        let est = fit_f(&ens, &*identity_map(), quad_lib(&ens), &FitOptions::default()).unwrap();
        let text = est.to_json().unwrap();
        assert!(text.contains("\"box\""));
        assert_eq!(DriftEstimate::from_json(&text).unwrap(), est);
    }
}
