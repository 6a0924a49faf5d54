//! Built-in systems: toy model, van der Pol, single-agent Vicsek,
//! Hénon–Heiles and stochastic Cucker–Smale.
//!
//! Models are addressed by name with a flat parameter record; missing
//! parameters take the published defaults, unknown ones are rejected.
//!
//! | name           | x-block      | y-block     | parameters                          |
//! |----------------|--------------|-------------|-------------------------------------|
//! | `toy`          | `x`          | `y`         | `sigma`                             |
//! | `van_der_pol`  | `x`          | `y`         | `mu`, `sigma`                       |
//! | `vicsek`       | `x, y`       | `θ`         | `v`, `k`, `sigma`                   |
//! | `henon_heiles` | `x, y`       | `px, py`    | `lambda`, `sigma1`, `sigma2`        |
//! | `cucker_smale` | positions    | velocities  | `n_agents`, `dim`, `sigma`, `kernel_exponent` |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisLibrary, BasisSpec1D, SparseRow};
use crate::diffusion::{qv_with, Increments, QuadraticVariationRecord};
use crate::error::{Error, Result};
use crate::lstsq::{assemble, FitOptions, NormalEquations};
use crate::simulate::TrajectoryEnsemble;
use crate::system::{
    diagonal_sigma, identity_map, select_map, InitialDistribution, MatrixMap, ModelSystem, SystemDimensions,
    VectorMap,
};

pub const MODEL_NAMES: [&str; 5] = ["toy", "van_der_pol", "vicsek", "henon_heiles", "cucker_smale"];

/// A zoo entry with its parameters filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum BuiltinModel {
    Toy { sigma: f64 },
    VanDerPol { mu: f64, sigma: f64 },
    Vicsek { v: f64, k: f64, sigma: f64 },
    HenonHeiles { lambda: f64, sigma1: f64, sigma2: f64 },
    CuckerSmale { n_agents: usize, dim: usize, sigma: f64, kernel_exponent: f64 },
}

fn take(params: &mut BTreeMap<String, f64>, key: &str, default: f64) -> Result<f64> {
    let v = params.remove(key).unwrap_or(default);
    if !v.is_finite() {
        return Err(Error::config(format!("model.params.{key}"), "must be finite"));
    }
    Ok(v)
}

fn take_count(params: &mut BTreeMap<String, f64>, key: &str, default: usize) -> Result<usize> {
    let v = take(params, key, default as f64)?;
    if v < 1.0 || v.fract() != 0.0 {
        return Err(Error::config(format!("model.params.{key}"), "must be a positive integer"));
    }
    Ok(v as usize)
}

fn take_sigma(params: &mut BTreeMap<String, f64>, key: &str, default: f64) -> Result<f64> {
    let v = take(params, key, default)?;
    if v < 0.0 {
        return Err(Error::config(format!("model.params.{key}"), "must be non-negative"));
    }
    Ok(v)
}

impl BuiltinModel {
    /// Resolves a name and parameter record, filling defaults.
    pub fn from_params(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let mut p = params.clone();
        let model = match name {
            "toy" => BuiltinModel::Toy {
                sigma: take_sigma(&mut p, "sigma", 0.1)?,
            },
            "van_der_pol" => BuiltinModel::VanDerPol {
                mu: take(&mut p, "mu", 1.0)?,
                sigma: take_sigma(&mut p, "sigma", 0.1)?,
            },
            "vicsek" => BuiltinModel::Vicsek {
                v: take(&mut p, "v", 0.03)?,
                k: take(&mut p, "k", 0.05)?,
                sigma: take_sigma(&mut p, "sigma", 0.08)?,
            },
            "henon_heiles" => BuiltinModel::HenonHeiles {
                lambda: take(&mut p, "lambda", 1.0)?,
                sigma1: take_sigma(&mut p, "sigma1", 0.07)?,
                sigma2: take_sigma(&mut p, "sigma2", 0.05)?,
            },
            "cucker_smale" => BuiltinModel::CuckerSmale {
                n_agents: take_count(&mut p, "n_agents", 20)?,
                dim: take_count(&mut p, "dim", 2)?,
                sigma: take_sigma(&mut p, "sigma", 0.1)?,
                kernel_exponent: take(&mut p, "kernel_exponent", 0.25)?,
            },
            other => {
                return Err(Error::config(
                    "model.name",
                    format!("unknown model '{other}', expected one of {}", MODEL_NAMES.join(", ")),
                ))
            }
        };
        if let Some(key) = p.keys().next() {
            return Err(Error::config(
                format!("model.params.{key}"),
                format!("unknown parameter for model '{name}'"),
            ));
        }
        Ok(model)
    }

    pub fn name(&self) -> &'static str {
        match self {
            BuiltinModel::Toy { .. } => "toy",
            BuiltinModel::VanDerPol { .. } => "van_der_pol",
            BuiltinModel::Vicsek { .. } => "vicsek",
            BuiltinModel::HenonHeiles { .. } => "henon_heiles",
            BuiltinModel::CuckerSmale { .. } => "cucker_smale",
        }
    }

    /// True diffusion entries, one per `y` coordinate.
    pub fn sigma_diagonal(&self) -> Vec<f64> {
        match *self {
            BuiltinModel::Toy { sigma } | BuiltinModel::VanDerPol { sigma, .. } | BuiltinModel::Vicsek { sigma, .. } => {
                vec![sigma]
            }
            BuiltinModel::HenonHeiles { sigma1, sigma2, .. } => vec![sigma1, sigma2],
            BuiltinModel::CuckerSmale { n_agents, dim, sigma, .. } => vec![sigma; n_agents * dim],
        }
    }

    pub fn build(&self) -> Result<ModelSystem> {
        match *self {
            BuiltinModel::Toy { sigma } => toy(sigma),
            BuiltinModel::VanDerPol { mu, sigma } => van_der_pol(mu, sigma),
            BuiltinModel::Vicsek { v, k, sigma } => vicsek(v, k, sigma),
            BuiltinModel::HenonHeiles { lambda, sigma1, sigma2 } => henon_heiles(lambda, sigma1, sigma2),
            BuiltinModel::CuckerSmale { .. } => Ok(cucker_smale_system(&self.cucker_smale_spec()?)),
        }
    }

    pub fn cucker_smale_spec(&self) -> Result<CuckerSmaleSpec> {
        match *self {
            BuiltinModel::CuckerSmale { n_agents, dim, sigma, kernel_exponent } => Ok(CuckerSmaleSpec::new(
                n_agents,
                dim,
                Arc::new(move |r: f64| (1.0 + r * r).powf(-kernel_exponent)),
                sigma,
            )),
            _ => Err(Error::Contract(format!("'{}' is not a Cucker–Smale model", self.name()))),
        }
    }

    /// Uniform(0,1) on every coordinate; Vicsek's heading is uniform on `[0, 2π)`.
    pub fn default_initial(&self) -> InitialDistribution {
        let dim = match *self {
            BuiltinModel::Toy { .. } | BuiltinModel::VanDerPol { .. } => 2,
            BuiltinModel::Vicsek { .. } => {
                return InitialDistribution::UniformAngle {
                    lower: vec![0.0; 3],
                    upper: vec![1.0; 3],
                    angles: vec![2],
                }
            }
            BuiltinModel::HenonHeiles { .. } => 4,
            BuiltinModel::CuckerSmale { n_agents, dim, .. } => 2 * n_agents * dim,
        };
        InitialDistribution::unit_box(dim)
    }
}

/// [`BuiltinModel::from_params`] followed by [`BuiltinModel::build`].
pub fn make_builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSystem> {
    BuiltinModel::from_params(name, params)?.build()
}

/// `dx = (0.4x − 0.1xy) dt`, `dy = (−0.8y + 0.2x²) dt + σ dw`.
pub fn toy(sigma: f64) -> Result<ModelSystem> {
    ModelSystem::new(
        SystemDimensions::identity_features(1, 1)?,
        Arc::new(|z: &[f64], o: &mut [f64]| o[0] = 0.4 * z[0] - 0.1 * z[0] * z[1]),
        Arc::new(|z: &[f64], o: &mut [f64]| o[0] = -0.8 * z[1] + 0.2 * z[0] * z[0]),
        diagonal_sigma(&[sigma]),
    )
}

/// `dx = y dt`, `dy = (μ(1 − x²)y − x) dt + σ dw`.
pub fn van_der_pol(mu: f64, sigma: f64) -> Result<ModelSystem> {
    ModelSystem::new(
        SystemDimensions::identity_features(1, 1)?,
        Arc::new(|z: &[f64], o: &mut [f64]| o[0] = z[1]),
        Arc::new(move |z: &[f64], o: &mut [f64]| o[0] = mu * (1.0 - z[0] * z[0]) * z[1] - z[0]),
        diagonal_sigma(&[sigma]),
    )
}

/// State `(x, y, θ)`; `f(θ) = v(cos θ, sin θ)`, `g(x, y) = k(x − y)`.
pub fn vicsek(v: f64, k: f64, sigma: f64) -> Result<ModelSystem> {
    let mut m = ModelSystem::with_features(
        SystemDimensions::new(2, 1, 1, 2)?,
        Arc::new(move |th: &[f64], o: &mut [f64]| {
            o[0] = v * th[0].cos();
            o[1] = v * th[0].sin();
        }),
        Arc::new(move |p: &[f64], o: &mut [f64]| o[0] = k * (p[0] - p[1])),
        select_map(vec![2]),
        select_map(vec![0, 1]),
        diagonal_sigma(&[sigma]),
    )?;
    m.periodic[2] = true;
    Ok(m)
}

/// State `(x, y, px, py)`; `f = (px, py)`,
/// `g = (−x − 2λxy, −y − λ(x² − y²))`, `σ^y = diag(σ₁, σ₂)`.
pub fn henon_heiles(lambda: f64, sigma1: f64, sigma2: f64) -> Result<ModelSystem> {
    ModelSystem::with_features(
        SystemDimensions::new(2, 2, 2, 2)?,
        identity_map(),
        Arc::new(move |q: &[f64], o: &mut [f64]| {
            let (x, y) = (q[0], q[1]);
            o[0] = -x - 2.0 * lambda * x * y;
            o[1] = -y - lambda * (x * x - y * y);
        }),
        select_map(vec![2, 3]),
        select_map(vec![0, 1]),
        diagonal_sigma(&[sigma1, sigma2]),
    )
}

pub type KernelFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type SpeedNoise = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `N` agents in `ℝ^d` with alignment kernel `φ` and per-agent noise `σ(v_i)`.
#[derive(Clone)]
pub struct CuckerSmaleSpec {
    pub n_agents: usize,
    pub dim: usize,
    pub kernel_phi: KernelFn,
    pub sigma_v: SpeedNoise,
}

impl std::fmt::Debug for CuckerSmaleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CuckerSmaleSpec")
            .field("n_agents", &self.n_agents)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl CuckerSmaleSpec {
    /// Constant noise `σ(v) ≡ sigma`.
    pub fn new(n_agents: usize, dim: usize, kernel_phi: KernelFn, sigma: f64) -> Self {
        CuckerSmaleSpec {
            n_agents,
            dim,
            kernel_phi,
            sigma_v: Arc::new(move |_| sigma),
        }
    }

    pub fn block_dim(&self) -> usize {
        self.n_agents * self.dim
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Sum in ascending order so the result does not depend on agent labels.
fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `(1/N) Σ_{j≠i} φ(‖x_j − x_i‖)(v_j − v_i)` for every agent `i`; all
/// arrays are agent-major `N × d`.
pub fn cs_drift(spec: &CuckerSmaleSpec, positions: &[f64], velocities: &[f64], out: &mut [f64]) {
    let (n, d) = (spec.n_agents, spec.dim);
    let inv_n = 1.0 / n as f64;
    let mut weights = vec![0.0; n];
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let xi = &positions[i * d..(i + 1) * d];
        for (j, w) in weights.iter_mut().enumerate() {
            *w = if j == i { 0.0 } else { (spec.kernel_phi)(distance(&positions[j * d..(j + 1) * d], xi)) };
        }
        for c in 0..d {
            terms.clear();
            let vic = velocities[i * d + c];
            terms.extend((0..n).filter(|&j| j != i).map(|j| weights[j] * (velocities[j * d + c] - vic)));
            out[i * d + c] = ordered_sum(&mut terms) * inv_n;
        }
    }
}

/// The `2Nd`-dimensional mSDE: `dx_i = v_i dt`, `dv_i = cs_drift dt + σ(v_i) dw_i`.
pub fn cucker_smale_system(spec: &CuckerSmaleSpec) -> ModelSystem {
    let nd = spec.block_dim();
    let dims = SystemDimensions {
        total: 2 * nd,
        x: nd,
        y: nd,
        feature_f: nd,
        feature_g: 2 * nd,
    };
    let drift_spec = spec.clone();
    let drift_g: VectorMap = Arc::new(move |z: &[f64], o: &mut [f64]| {
        cs_drift(&drift_spec, &z[..nd], &z[nd..], o);
    });
    let noise_spec = spec.clone();
    let sigma: MatrixMap = Arc::new(move |v: &[f64], out: &mut DMatrix<f64>| {
        out.fill(0.0);
        let d = noise_spec.dim;
        for i in 0..noise_spec.n_agents {
            let s = (noise_spec.sigma_v)(&v[i * d..(i + 1) * d]);
            for c in 0..d {
                out[(i * d + c, i * d + c)] = s;
            }
        }
    });
    ModelSystem::with_features(dims, identity_map(), drift_g, select_map((nd..2 * nd).collect()), identity_map(), sigma)
        .expect("Cucker–Smale dimensions are non-zero")
}

/// Dense least-squares system `design · c ≈ targets`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    pub design: DMatrix<f64>,
    pub targets: DVector<f64>,
}

fn check_cs_dims(ens: &TrajectoryEnsemble, n: usize, d: usize, lib: &BasisLibrary) -> Result<()> {
    let nd = n * d;
    if ens.dims.x != nd || ens.dims.y != nd {
        return Err(Error::DimensionMismatch {
            block: "cucker_smale state",
            expected: 2 * nd,
            got: ens.dims.total,
        });
    }
    if lib.dims_in() != 1 {
        return Err(Error::DimensionMismatch {
            block: "kernel basis input",
            expected: 1,
            got: lib.dims_in(),
        });
    }
    Ok(())
}

/// Calls `emit(row, target)` once per agent coordinate at step `l` of
/// trajectory `m`; `row[k] = (1/N) Σ_{j≠i} B_k(r_ij)(v_j − v_i)`.
fn cs_rows<F: FnMut(&[f64], f64)>(
    ens: &TrajectoryEnsemble,
    n: usize,
    d: usize,
    lib: &BasisLibrary,
    m: usize,
    l: usize,
    emit: &mut F,
) {
    let nd = n * d;
    let p = lib.len();
    let (z, z1) = (ens.state(m, l), ens.state(m, l + 1));
    let (x, v) = z.split_at(nd);
    let dt = ens.dt_at(l);
    let inv_n = 1.0 / n as f64;
    let mut sparse = SparseRow::default();
    // per pair: basis values at r_ij
    let mut pair_basis: Vec<SparseRow> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let mut r = SparseRow::default();
            if i != j {
                lib.eval_sparse(&[distance(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d])], &mut sparse);
                r = sparse.clone();
            }
            pair_basis.push(r);
        }
    }
    let mut row = vec![0.0; p];
    for i in 0..n {
        for c in 0..d {
            row.fill(0.0);
            let vic = v[i * d + c];
            for j in (0..n).filter(|&j| j != i) {
                let dv = v[j * d + c] - vic;
                for (k, b) in pair_basis[i * n + j].iter() {
                    row[k] += b * dv;
                }
            }
            row.iter_mut().for_each(|r| *r *= inv_n);
            let target = (z1[nd + i * d + c] - v[i * d + c]) / dt;
            emit(&row, target);
        }
    }
}

/// The kernel regression as an explicit dense system, rows ordered by
/// trajectory, step, agent and coordinate.
pub fn cs_feature_design(ens: &TrajectoryEnsemble, n: usize, d: usize, lib: &BasisLibrary) -> Result<RegressionSystem> {
    check_cs_dims(ens, n, d, lib)?;
    let p = lib.len();
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for m in 0..ens.n_trajectories {
        for l in 0..ens.n_times() - 1 {
            cs_rows(ens, n, d, lib, m, l, &mut |row: &[f64], t| {
                data.extend_from_slice(row);
                targets.push(t);
            });
        }
    }
    Ok(RegressionSystem {
        design: DMatrix::from_row_slice(targets.len(), p, &data),
        targets: DVector::from_vec(targets),
    })
}

/// Fitted interaction kernel `φ̂(r) = Σ_k c_k B_k(r)`, clamped beyond `r_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub library: BasisLibrary,
    pub coefficients: Vec<f64>,
    pub r_max: f64,
}

impl KernelEstimate {
    pub fn evaluate(&self, r: f64) -> f64 {
        let mut row = SparseRow::default();
        self.library.eval_sparse(&[r.clamp(0.0, self.r_max)], &mut row);
        row.iter().map(|(k, b)| self.coefficients[k] * b).sum()
    }

    /// `(r, φ(r), φ̂(r))` on `n_points` equispaced radii in `[0, r_max]`.
    pub fn to_csv(&self, truth: &dyn Fn(f64) -> f64, n_points: usize) -> String {
        let mut s = String::from("r,phi,phi_hat\n");
        for i in 0..n_points {
            let r = self.r_max * i as f64 / (n_points.max(2) - 1) as f64;
            let _ = writeln!(s, "{r},{},{}", truth(r), self.evaluate(r));
        }
        s
    }
}

const MAX_DISTANCE_SAMPLES: usize = 4_000_000;

fn time_stride(ens: &TrajectoryEnsemble, n: usize) -> usize {
    let per_step = ens.n_trajectories * n * (n - 1) / 2;
    (per_step * ens.n_times()).div_ceil(MAX_DISTANCE_SAMPLES).max(1)
}

/// Pairwise distances `i < j` at every `stride`-th time of every trajectory.
fn pairwise_distances(ens: &TrajectoryEnsemble, n: usize, d: usize, stride: usize) -> Vec<f64> {
    (0..ens.n_trajectories)
        .into_par_iter()
        .flat_map_iter(|m| {
            (0..ens.n_times()).step_by(stride).flat_map(move |l| {
                let x = &ens.state(m, l)[..n * d];
                (0..n).flat_map(move |i| {
                    (i + 1..n).map(move |j| distance(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]))
                })
            })
        })
        .collect()
}

/// Upper end of the kernel domain: the 99th percentile of observed
/// pairwise distances, padded by 5%.
pub fn kernel_r_max(ens: &TrajectoryEnsemble, n: usize, d: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Contract("kernel learning needs at least two agents".into()));
    }
    let mut r = pairwise_distances(ens, n, d, time_stride(ens, n));
    let k = ((r.len() as f64 * 0.99).ceil() as usize).clamp(1, r.len()) - 1;
    let (_, q, _) = r.select_nth_unstable_by(k, f64::total_cmp);
    let r_max = 1.05 * *q;
    if !(r_max > 0.0) {
        return Err(Error::Contract("agents never separate; kernel domain is empty".into()));
    }
    Ok(r_max)
}

/// Degree-`degree` B-spline library on `[0, r_max]`.
pub fn kernel_library(r_max: f64, segments: usize, degree: usize) -> Result<BasisLibrary> {
    BasisLibrary::new(vec![BasisSpec1D::bspline(0.0, r_max, segments, degree)?])
}

/// Streams the kernel regression into normal equations and solves it.
pub fn fit_cs_kernel(
    ens: &TrajectoryEnsemble,
    n: usize,
    d: usize,
    lib: BasisLibrary,
    options: &FitOptions,
) -> Result<KernelEstimate> {
    check_cs_dims(ens, n, d, &lib)?;
    let p = lib.len();
    let fill = |m: usize, ne: &mut NormalEquations| {
        for l in 0..ens.n_times() - 1 {
            cs_rows(ens, n, d, &lib, m, l, &mut |row: &[f64], t| ne.add_dense(row, t, 0));
        }
    };
    let ne = assemble(ens.n_trajectories, p, 1, true, fill).finish();
    let c = ne.solve(options)?;
    let r_max = lib.bounding_box().upper[0];
    Ok(KernelEstimate {
        coefficients: c.column(0).iter().copied().collect(),
        library: lib,
        r_max,
    })
}

/// Relative `L²(ρ_r)` error of `φ̂` against `φ`, with `ρ_r` the empirical
/// measure of all observed pairwise distances.
pub fn kernel_l2_error(est: &KernelEstimate, truth: &(dyn Fn(f64) -> f64 + Sync), ens: &TrajectoryEnsemble, n: usize, d: usize) -> Result<f64> {
    let parts: Vec<(f64, f64)> = (0..ens.n_trajectories)
        .into_par_iter()
        .map(|m| {
            let (mut num, mut den) = (0.0, 0.0);
            for l in 0..ens.n_times() {
                let x = &ens.state(m, l)[..n * d];
                for i in 0..n {
                    for j in i + 1..n {
                        let r = distance(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
                        let (a, b) = (truth(r), est.evaluate(r));
                        num += (a - b) * (a - b);
                        den += a * a;
                    }
                }
            }
            (num, den)
        })
        .collect();
    let (num, den) = parts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    if !(den > 0.0) {
        return Err(Error::Contract("true kernel vanishes on every observed distance".into()));
    }
    Ok((num / den).sqrt())
}

/// Stacks every agent coordinate of every trajectory as a separate scalar
/// path, so that the constant fit returns the shared `σ̂²` as a `1 × 1` matrix.
pub fn cs_stacked_qv(ens: &TrajectoryEnsemble, source: Increments) -> QuadraticVariationRecord {
    let qv = qv_with(ens, source);
    let per_trajectory = qv
        .per_trajectory
        .iter()
        .flat_map(|q| (0..q.nrows()).map(move |k| DMatrix::from_element(1, 1, q[(k, k)])))
        .collect();
    QuadraticVariationRecord {
        per_trajectory,
        horizon: qv.horizon,
        raw_energy: qv.raw_energy,
    }
}

/// Mean agent velocity at every time of trajectory `m`.
pub fn mean_velocity(ens: &TrajectoryEnsemble, n: usize, d: usize, m: usize) -> Vec<Vec<f64>> {
    (0..ens.n_times())
        .map(|l| {
            let v = &ens.state(m, l)[n * d..];
            (0..d)
                .map(|c| (0..n).map(|i| v[i * d + c]).sum::<f64>() / n as f64)
                .collect()
        })
        .collect()
}

/// Largest drift of the mean velocity per unit time over the ensemble.
pub fn momentum_drift(ens: &TrajectoryEnsemble, n: usize, d: usize) -> f64 {
    (0..ens.n_trajectories)
        .map(|m| {
            let mv = mean_velocity(ens, n, d, m);
            mv.iter()
                .zip(&ens.times)
                .skip(1)
                .map(|(v, &t)| v.iter().zip(&mv[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / t)
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Velocity variance across agents, `(1/N) Σ_i ‖v_i − v̄‖²`.
pub fn velocity_spread(state: &[f64], n: usize, d: usize) -> f64 {
    let v = &state[n * d..];
    let mut var = 0.0;
    for c in 0..d {
        let mean = (0..n).map(|i| v[i * d + c]).sum::<f64>() / n as f64;
        var += (0..n).map(|i| (v[i * d + c] - mean).powi(2)).sum::<f64>();
    }
    var / n as f64
}

/// Relabels agents: agent `i` of the output is agent `perm[i]` of the input.
pub fn permute_agents(ens: &TrajectoryEnsemble, n: usize, d: usize, perm: &[usize]) -> TrajectoryEnsemble {
    let nd = n * d;
    let remap = |block: &[f64], out: &mut [f64]| {
        for (i, &p) in perm.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&block[p * d..(p + 1) * d]);
        }
    };
    let mut out = ens.clone();
    for (src, dst) in ens.states.chunks_exact(2 * nd).zip(out.states.chunks_exact_mut(2 * nd)) {
        let (dx, dv) = dst.split_at_mut(nd);
        remap(&src[..nd], dx);
        remap(&src[nd..], dv);
    }
    for (src, dst) in ens.noise_increments.chunks_exact(nd).zip(out.noise_increments.chunks_exact_mut(nd)) {
        remap(src, dst);
    }
    out
}
