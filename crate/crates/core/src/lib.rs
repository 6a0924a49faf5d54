//! Learning drift and diffusion of mixed stochastic differential equations
//! whose noise acts only on part of the state.
//!
//! The pipeline is
//!
//! 1. describe or pick a model ([`system::ModelSystem`], [`models`]),
//! 2. simulate an ensemble with recorded noise ([`simulate`]),
//! 3. estimate `Σ^y` from quadratic variations ([`diffusion`]) and the drifts
//!    `f`, `g` by least squares on a tensor basis ([`basis`], [`drift`]),
//! 4. score the result ([`metrics`]): `L²(ρ)` drift error, paired-noise
//!    trajectory error and Wasserstein-2 distances between time marginals.
//!
//! [`experiment`] ties these together behind declarative TOML configs; the
//! `msde` binary exposes it on the command line.

pub mod basis;
pub mod diffusion;
pub mod drift;
pub mod ensemble_io;
pub mod error;
pub mod experiment;
pub mod lstsq;
pub mod metrics;
pub mod models;
pub mod simulate;
pub mod system;
pub mod wasserstein;

pub use basis::{Basis, BasisConfig, BasisFamily, BasisLibrary, BasisSpec1D, BoundingBox};
pub use diffusion::{DiffusionEstimate, QuadraticVariationRecord};
pub use drift::{DiffusionWeight, DriftEstimate};
pub use error::{Error, Result};
pub use lstsq::{FitOptions, Regularization};
pub use simulate::{replay_ensemble, simulate_ensemble, SimulationConfig, TrajectoryEnsemble};
pub use system::{InitialDistribution, ModelSystem, StateVector, SystemDimensions};

use std::fs::File;
use std::io::Write;
use std::path::Path;

/// Writes through a sibling temp file and renames it into place.
pub fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut File) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write(&mut f)?;
    f.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn atomic_write_str(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |f| f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e)))
}

/// Serde adapter storing a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged rows".into());
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}
