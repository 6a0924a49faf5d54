//! The mixed-SDE data model.
//!
//! A [`ModelSystem`] describes
//!
//! ```text
//! dx = f(ξ_f(x, y)) dt
//! dy = g(ξ_g(x, y)) dt + σ^y(y) dw^y
//! ```
//!
//! with the noise-free block `x` of length `D_x` stacked on top of the noisy
//! block `y` of length `D_y`. Every callable writes into a caller-provided
//! buffer so the simulation hot loop does not allocate.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the asymmetry of `σ^y` outputs.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// `(input, output)` vector map.
pub type VectorMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(y, output)` matrix map; the output is pre-sized `D_y × D_y`.
pub type MatrixMap = Arc<dyn Fn(&[f64], &mut DMatrix<f64>) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemDimensions {
    pub total: usize,
    pub x: usize,
    pub y: usize,
    pub feature_f: usize,
    pub feature_g: usize,
}

impl SystemDimensions {
    pub fn new(x: usize, y: usize, feature_f: usize, feature_g: usize) -> Result<Self> {
        if x == 0 || y == 0 {
            return Err(Error::Contract(format!(
                "both blocks must be non-empty (D_x = {x}, D_y = {y})"
            )));
        }
        if feature_f == 0 || feature_g == 0 {
            return Err(Error::Contract("feature dimensions must be positive".into()));
        }
        Ok(SystemDimensions {
            total: x + y,
            x,
            y,
            feature_f,
            feature_g,
        })
    }

    /// Dimensions with identity feature maps on the full state.
    pub fn identity_features(x: usize, y: usize) -> Result<Self> {
        Self::new(x, y, x + y, x + y)
    }

    pub fn validate(&self) -> Result<()> {
        let again = Self::new(self.x, self.y, self.feature_f, self.feature_g)?;
        if again.total != self.total {
            return Err(Error::Contract(format!(
                "D_total = {} but D_x + D_y = {}",
                self.total, again.total
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl StateVector {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        StateVector { x, y }
    }

    /// Splits a full state `z = [x; y]`.
    pub fn split(dims: &SystemDimensions, z: &[f64]) -> Result<Self> {
        if z.len() != dims.total {
            return Err(Error::DimensionMismatch {
                block: "state",
                expected: dims.total,
                got: z.len(),
            });
        }
        Ok(StateVector {
            x: z[..dims.x].to_vec(),
            y: z[dims.x..].to_vec(),
        })
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.x.len() + self.y.len());
        z.extend_from_slice(&self.x);
        z.extend_from_slice(&self.y);
        z
    }

    fn check(&self, dims: &SystemDimensions) -> Result<()> {
        if self.x.len() != dims.x {
            return Err(Error::DimensionMismatch {
                block: "x_block",
                expected: dims.x,
                got: self.x.len(),
            });
        }
        if self.y.len() != dims.y {
            return Err(Error::DimensionMismatch {
                block: "y_block",
                expected: dims.y,
                got: self.y.len(),
            });
        }
        Ok(())
    }
}

/// Scratch buffers for drift evaluation.
#[derive(Debug, Clone)]
pub struct DriftWorkspace {
    feat_f: Vec<f64>,
    feat_g: Vec<f64>,
}

impl DriftWorkspace {
    pub fn new(dims: &SystemDimensions) -> Self {
        DriftWorkspace {
            feat_f: vec![0.0; dims.feature_f],
            feat_g: vec![0.0; dims.feature_g],
        }
    }
}

/// A complete mSDE: dimensions, drifts, feature maps and `σ^y`.
#[derive(Clone)]
pub struct ModelSystem {
    pub dims: SystemDimensions,
    pub drift_f: VectorMap,
    pub drift_g: VectorMap,
    pub feature_f: VectorMap,
    pub feature_g: VectorMap,
    pub diffusion_sigma_y: MatrixMap,
    /// Per state coordinate: true if the coordinate is an angle.
    pub periodic: Vec<bool>,
}

impl fmt::Debug for ModelSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSystem")
            .field("dims", &self.dims)
            .field("periodic", &self.periodic)
            .finish_non_exhaustive()
    }
}

pub fn identity_map() -> VectorMap {
    Arc::new(|z: &[f64], out: &mut [f64]| out.copy_from_slice(z))
}

/// Feature map selecting the listed state coordinates.
pub fn select_map(indices: Vec<usize>) -> VectorMap {
    Arc::new(move |z: &[f64], out: &mut [f64]| {
        for (o, &i) in out.iter_mut().zip(&indices) {
            *o = z[i];
        }
    })
}

pub fn zero_map() -> VectorMap {
    Arc::new(|_: &[f64], out: &mut [f64]| out.fill(0.0))
}

/// `σ^y(y) ≡ sigma` for a fixed matrix.
pub fn constant_sigma(sigma: DMatrix<f64>) -> MatrixMap {
    Arc::new(move |_: &[f64], out: &mut DMatrix<f64>| out.copy_from(&sigma))
}

/// `σ^y(y) ≡ diag(entries)`.
pub fn diagonal_sigma(entries: &[f64]) -> MatrixMap {
    constant_sigma(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(
        entries,
    )))
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

impl ModelSystem {
    /// A model with identity feature maps on the full state.
    pub fn new(
        dims: SystemDimensions,
        drift_f: VectorMap,
        drift_g: VectorMap,
        diffusion_sigma_y: MatrixMap,
    ) -> Result<Self> {
        dims.validate()?;
        if dims.feature_f != dims.total || dims.feature_g != dims.total {
            return Err(Error::Contract(
                "identity feature maps need feature dimensions equal to D_total".into(),
            ));
        }
        Ok(ModelSystem {
            dims,
            drift_f,
            drift_g,
            feature_f: identity_map(),
            feature_g: identity_map(),
            diffusion_sigma_y,
            periodic: vec![false; dims.total],
        })
    }

    pub fn with_features(
        dims: SystemDimensions,
        drift_f: VectorMap,
        drift_g: VectorMap,
        feature_f: VectorMap,
        feature_g: VectorMap,
        diffusion_sigma_y: MatrixMap,
    ) -> Result<Self> {
        dims.validate()?;
        Ok(ModelSystem {
            dims,
            drift_f,
            drift_g,
            feature_f,
            feature_g,
            diffusion_sigma_y,
            periodic: vec![false; dims.total],
        })
    }

    /// Zero drift and zero diffusion.
    pub fn frozen(dims: SystemDimensions) -> Result<Self> {
        let ny = dims.y;
        Self::with_features(
            dims,
            zero_map(),
            zero_map(),
            zero_map(),
            zero_map(),
            constant_sigma(DMatrix::zeros(ny, ny)),
        )
    }

    /// Replaces both drifts, keeping dims, features and diffusion.
    pub fn with_drifts(&self, drift_f: VectorMap, drift_g: VectorMap) -> Self {
        ModelSystem {
            drift_f,
            drift_g,
            ..self.clone()
        }
    }

    pub fn with_diffusion(&self, diffusion_sigma_y: MatrixMap) -> Self {
        ModelSystem {
            diffusion_sigma_y,
            ..self.clone()
        }
    }

    /// `h(z) = [f(ξ_f(z)); g(ξ_g(z))]` written into `out` (length `D_total`).
    pub fn drift_into(&self, z: &[f64], ws: &mut DriftWorkspace, out: &mut [f64]) {
        let dx = self.dims.x;
        (self.feature_f)(z, &mut ws.feat_f);
        (self.drift_f)(&ws.feat_f, &mut out[..dx]);
        (self.feature_g)(z, &mut ws.feat_g);
        (self.drift_g)(&ws.feat_g, &mut out[dx..]);
    }

    pub fn full_drift(&self, state: &StateVector) -> Result<Vec<f64>> {
        state.check(&self.dims)?;
        let z = state.concat();
        let mut out = vec![0.0; self.dims.total];
        self.drift_into(&z, &mut DriftWorkspace::new(&self.dims), &mut out);
        Ok(out)
    }

    /// Evaluates `σ^y(y)` and checks symmetry.
    pub fn sigma_y(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        if y.len() != self.dims.y {
            return Err(Error::DimensionMismatch {
                block: "y_block",
                expected: self.dims.y,
                got: y.len(),
            });
        }
        let mut s = DMatrix::zeros(self.dims.y, self.dims.y);
        (self.diffusion_sigma_y)(y, &mut s);
        let asym = max_asymmetry(&s);
        if asym > SYMMETRY_TOL {
            return Err(Error::NonSymmetric { asymmetry: asym });
        }
        Ok(s)
    }

    /// `Σ^y(y) = σ^y (σ^y)ᵀ`, computed on demand.
    pub fn sigma_cov(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let s = self.sigma_y(y)?;
        Ok(&s * s.transpose())
    }

    /// Block diffusion `[[0, 0], [0, σ^y(y)]]` of shape `D_total × D_total`.
    pub fn full_diffusion(&self, state: &StateVector) -> Result<DMatrix<f64>> {
        state.check(&self.dims)?;
        let s = self.sigma_y(&state.y)?;
        let (dx, n) = (self.dims.x, self.dims.total);
        let mut out = DMatrix::zeros(n, n);
        out.view_mut((dx, dx), (self.dims.y, self.dims.y)).copy_from(&s);
        Ok(out)
    }
}

/// Seedable sampler for initial states.
#[derive(Clone)]
pub struct Sampler(pub Arc<dyn Fn(&mut dyn RngCore) -> Vec<f64> + Send + Sync>);

impl fmt::Debug for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Sampler(..)")
    }
}

/// Initial law `μ_0` of `z_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDistribution {
    /// Independent uniforms on `[lower_i, upper_i]`.
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
    /// A uniform box whose `angles` coordinates are instead uniform on `[0, 2π)`.
    UniformAngle {
        lower: Vec<f64>,
        upper: Vec<f64>,
        angles: Vec<usize>,
    },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    #[serde(skip)]
    CustomSampler(Sampler),
}

impl PartialEq for Sampler {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl InitialDistribution {
    pub fn unit_box(dim: usize) -> Self {
        InitialDistribution::UniformBox {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        match self {
            InitialDistribution::UniformBox { lower, .. }
            | InitialDistribution::UniformAngle { lower, .. } => Some(lower.len()),
            InitialDistribution::Gaussian { mean, .. } => Some(mean.len()),
            InitialDistribution::CustomSampler(_) => None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::config("simulation.initial", m));
        match self {
            InitialDistribution::UniformBox { lower, upper }
            | InitialDistribution::UniformAngle { lower, upper, .. } => {
                if lower.len() != dim || upper.len() != dim {
                    return bad(format!("bounds must have length {dim}"));
                }
                if lower.iter().zip(upper).any(|(a, b)| !(a <= b)) {
                    return bad("lower bound exceeds upper bound".into());
                }
                if let InitialDistribution::UniformAngle { angles, .. } = self {
                    if angles.iter().any(|&a| a >= dim) {
                        return bad("angle index out of range".into());
                    }
                }
            }
            InitialDistribution::Gaussian { mean, std } => {
                if mean.len() != dim || std.len() != dim {
                    return bad(format!("mean/std must have length {dim}"));
                }
                if std.iter().any(|s| !(*s >= 0.0)) {
                    return bad("standard deviations must be non-negative".into());
                }
            }
            InitialDistribution::CustomSampler(_) => {}
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, dim: usize) -> Result<Vec<f64>> {
        let z = match self {
            InitialDistribution::UniformBox { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                .collect(),
            InitialDistribution::UniformAngle {
                lower,
                upper,
                angles,
            } => {
                let mut z: Vec<f64> = lower
                    .iter()
                    .zip(upper)
                    .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                    .collect();
                for &i in angles {
                    z[i] = std::f64::consts::TAU * rng.random::<f64>();
                }
                z
            }
            InitialDistribution::Gaussian { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            InitialDistribution::CustomSampler(s) => (s.0)(rng),
        };
        if z.len() != dim {
            return Err(Error::DimensionMismatch {
                block: "initial state",
                expected: dim,
                got: z.len(),
            });
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelSystem {
        let dims = SystemDimensions::identity_features(1, 1).unwrap();
        ModelSystem::new(
            dims,
            Arc::new(|z: &[f64], o: &mut [f64]| o[0] = 0.4 * z[0] - 0.1 * z[0] * z[1]),
            Arc::new(|z: &[f64], o: &mut [f64]| o[0] = -0.8 * z[1] + 0.2 * z[0] * z[0]),
            diagonal_sigma(&[0.1]),
        )
        .unwrap()
    }

    #[test]
    fn dims_reject_empty_blocks() {
        assert!(SystemDimensions::new(0, 2, 1, 1).is_err());
        assert!(SystemDimensions::new(2, 0, 1, 1).is_err());
        let d = SystemDimensions::new(2, 3, 1, 2).unwrap();
        assert_eq!(d.total, 5);
    }

    #[test]
    fn toy_drift_at_one_one() {
        let h = toy().full_drift(&StateVector::new(vec![1.0], vec![1.0])).unwrap();
        assert!((h[0] - 0.3).abs() < 1e-15);
        assert!((h[1] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn frozen_model_has_zero_drift_and_diffusion() {
        let dims = SystemDimensions::new(2, 1, 1, 1).unwrap();
        let m = ModelSystem::frozen(dims).unwrap();
        let s = StateVector::new(vec![1.0, -2.0], vec![3.0]);
        assert_eq!(m.full_drift(&s).unwrap(), vec![0.0; 3]);
        assert_eq!(m.full_diffusion(&s).unwrap(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn diffusion_block_structure() {
        let d = toy()
            .full_diffusion(&StateVector::new(vec![0.5], vec![0.5]))
            .unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.1]));
    }

    #[test]
    fn mismatched_block_is_named() {
        let err = toy()
            .full_drift(&StateVector::new(vec![1.0, 2.0], vec![1.0]))
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { block: "x_block", .. }));
        let err = toy()
            .full_diffusion(&StateVector::new(vec![1.0], vec![]))
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { block: "y_block", .. }));
    }

    #[test]
    fn asymmetric_sigma_is_rejected() {
        let dims = SystemDimensions::identity_features(1, 2).unwrap();
        let m = ModelSystem::new(
            dims,
            zero_map(),
            zero_map(),
            constant_sigma(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])),
        )
        .unwrap();
        let err = m
            .full_diffusion(&StateVector::new(vec![0.0], vec![0.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::NonSymmetric { .. }));
    }

    #[test]
    fn initial_samplers_have_right_length() {
        let mut rng = rand::rng();
        let d = InitialDistribution::UniformAngle {
            lower: vec![0.0; 3],
            upper: vec![1.0; 3],
            angles: vec![2],
        };
        for _ in 0..100 {
            let z = d.sample(&mut rng, 3).unwrap();
            assert!(z[2] >= 0.0 && z[2] < std::f64::consts::TAU);
            assert!(z[0] >= 0.0 && z[0] <= 1.0);
        }
        let custom = InitialDistribution::CustomSampler(Sampler(Arc::new(|_| vec![1.0])));
        assert!(custom.sample(&mut rng, 2).is_err());
    }
}
