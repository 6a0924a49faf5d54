//! Declarative experiments.
//!
//! A TOML file fixes the model, simulation grid, hypothesis spaces, solver
//! options, snapshot times and acceptance checks of one run. The four
//! commands chain through files in an output directory:
//!
//! ```text
//! <out>/
//!   ensemble.bin            binary TrajectoryEnsemble (see `ensemble_io`)
//!   manifest.json           seed, dimensions, grid and SHA-256 of ensemble.bin
//!   estimates/drift_f.json  f̂ (drift models)
//!   estimates/drift_g.json  ĝ (drift models)
//!   estimates/kernel.json   φ̂ (Cucker–Smale)
//!   estimates/diffusion.json
//!   report/metrics.json     full-precision metrics
//!   report/metrics.csv      one header and one row, significant digits per config
//!   plots/*.csv             plot data
//!   summary.json, summary.txt   (reproduce only)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{Basis, BasisConfig, SparseRow};
use crate::diffusion::{
    fit_sigma_constant, fit_sigma_state_dependent_with, qv_with, DiffusionEstimate, Increments,
};
use crate::drift::{fit_f, fit_g, DiffusionWeight, DriftEstimate};
use crate::ensemble_io;
use crate::error::{Error, Result};
use crate::lstsq::FitOptions;
use crate::metrics::{
    format_sig, l2_rho_error_models, trajectory_error, wasserstein_curve, MetricReport, OccupationMeasure,
    COUPLING_NOTE,
};
use crate::models::{
    cs_drift, cs_stacked_qv, cucker_smale_system, fit_cs_kernel, kernel_l2_error, kernel_library, kernel_r_max,
    momentum_drift, velocity_spread, BuiltinModel, CuckerSmaleSpec, KernelEstimate, MODEL_NAMES,
};
use crate::simulate::{replay_ensemble, simulate_ensemble, SimulationConfig, TrajectoryEnsemble};
use crate::system::{InitialDistribution, ModelSystem, SystemDimensions};
use crate::wasserstein::W2Options;
use crate::{atomic_write_str, matrix_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::config("scale", format!("expected 'paper' or 'desk', got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub horizon: f64,
    pub dt: f64,
    pub n_trajectories: usize,
    pub seed: u64,
    /// Defaults to the model's own initial law.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialDistribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionClass {
    #[default]
    ConstantMatrix,
    DiagonalStateDependent,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    #[serde(default)]
    pub model_class: DiffusionClass,
    /// Basis over the `y`-block for the state-dependent class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisConfig>,
    /// Recompute `Σ̂` from `Δy − ĝ Δt` once `ĝ` is known.
    #[serde(default = "yes")]
    pub compensate_drift: bool,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            model_class: DiffusionClass::ConstantMatrix,
            basis: None,
            compensate_drift: true,
        }
    }
}

fn default_csv_points() -> usize {
    201
}

fn default_invariant_trajectories() -> usize {
    10
}

/// Interaction-kernel learning for Cucker–Smale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub segments: usize,
    pub degree: usize,
    #[serde(default = "default_csv_points")]
    pub csv_points: usize,
    /// Zero-noise paths simulated for the momentum and flocking checks.
    #[serde(default = "default_invariant_trajectories")]
    pub invariant_trajectories: usize,
}

/// One pass/fail criterion on a named metric: either
/// `|value − target| ≤ tolerance` (relative to `target` if `relative`) or
/// `value ≤ max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub relative: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default = "yes")]
    pub blocking: bool,
}

impl Check {
    fn validate(&self, i: usize) -> Result<()> {
        let ok = match (self.target, self.tolerance, self.max) {
            (Some(t), Some(tol), None) => t.is_finite() && tol >= 0.0,
            (None, None, Some(m)) => m.is_finite(),
            _ => false,
        };
        if !ok {
            return Err(Error::config(
                format!("checks[{i}]"),
                "give either `target` with `tolerance`, or `max`",
            ));
        }
        Ok(())
    }

    pub fn bounds(&self) -> (f64, f64) {
        match (self.target, self.tolerance, self.max) {
            (Some(t), Some(tol), _) => {
                let half = if self.relative { tol * t.abs() } else { tol };
                (t - half, t + half)
            }
            (_, _, Some(m)) => (f64::NEG_INFINITY, m),
            _ => (f64::NAN, f64::NAN),
        }
    }

    pub fn passes(&self, value: f64) -> bool {
        let (lo, hi) = self.bounds();
        value.is_finite() && lo <= value && value <= hi
    }

    fn describe(&self) -> String {
        match (self.target, self.tolerance, self.max) {
            (Some(t), Some(tol), _) if self.relative => format!("{t} ± {}%", tol * 100.0),
            (Some(t), Some(tol), _) => format!("{t} ± {tol}"),
            (_, _, Some(m)) => format!("≤ {m}"),
            _ => String::new(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_precision() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub simulation: SimulationSection,
    /// Basis on `ξ_f` features; unused for Cucker–Smale, whose `f` is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_f: Option<BasisConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_g: Option<BasisConfig>,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub regularization: FitOptions,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Significant digits in CSV rows and text summaries.
    #[serde(default = "default_precision")]
    pub report_precision: usize,
    #[serde(default)]
    pub wasserstein: W2Options,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSection>,
    #[serde(default)]
    pub checks: Vec<Check>,
    /// Published values by metric name, compared within a factor of 3.
    #[serde(default)]
    pub published: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| format!("byte {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<config>".into());
            Error::config(path, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { path: at, message } => {
                Error::config(format!("{}: {at}", path.display()), message)
            }
            other => other,
        })
    }

    pub fn simulation_config(&self, model: &BuiltinModel) -> SimulationConfig {
        let s = &self.simulation;
        SimulationConfig {
            horizon: s.horizon,
            dt: s.dt,
            n_trajectories: s.n_trajectories,
            seed: s.seed,
            initial: s.initial.clone().unwrap_or_else(|| model.default_initial()),
        }
    }
}

const BUNDLED: [(&str, &str, &str); 10] = [
    ("toy", "desk", include_str!("../configs/toy_desk.toml")),
    ("toy", "paper", include_str!("../configs/toy_paper.toml")),
    ("van_der_pol", "desk", include_str!("../configs/van_der_pol_desk.toml")),
    ("van_der_pol", "paper", include_str!("../configs/van_der_pol_paper.toml")),
    ("vicsek", "desk", include_str!("../configs/vicsek_desk.toml")),
    ("vicsek", "paper", include_str!("../configs/vicsek_paper.toml")),
    ("henon_heiles", "desk", include_str!("../configs/henon_heiles_desk.toml")),
    ("henon_heiles", "paper", include_str!("../configs/henon_heiles_paper.toml")),
    ("cucker_smale", "desk", include_str!("../configs/cucker_smale_desk.toml")),
    ("cucker_smale", "paper", include_str!("../configs/cucker_smale_paper.toml")),
];

/// Raw TOML of a bundled experiment.
pub fn bundled_config_text(name: &str, scale: Scale) -> Result<&'static str> {
    BUNDLED
        .iter()
        .find(|(n, s, _)| *n == name && *s == scale.as_str())
        .map(|(_, _, text)| *text)
        .ok_or_else(|| {
            Error::config(
                "example",
                format!("no bundled experiment '{name}', expected one of {}", MODEL_NAMES.join(", ")),
            )
        })
}

pub fn bundled_config(name: &str, scale: Scale) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(bundled_config_text(name, scale)?)
}

/// Paths of every artifact under an output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutputLayout { root: root.into() }
    }
    pub fn ensemble(&self) -> PathBuf {
        self.root.join("ensemble.bin")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn estimates(&self) -> PathBuf {
        self.root.join("estimates")
    }
    pub fn drift_f(&self) -> PathBuf {
        self.estimates().join("drift_f.json")
    }
    pub fn drift_g(&self) -> PathBuf {
        self.estimates().join("drift_g.json")
    }
    pub fn kernel(&self) -> PathBuf {
        self.estimates().join("kernel.json")
    }
    pub fn diffusion(&self) -> PathBuf {
        self.estimates().join("diffusion.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report").join("metrics.json")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report").join("metrics.csv")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn summary_json(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn summary_txt(&self) -> PathBuf {
        self.root.join("summary.txt")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub model: String,
    pub seed: u64,
    pub dims: SystemDimensions,
    pub n_trajectories: usize,
    pub n_times: usize,
    pub dt: f64,
    pub horizon: f64,
    pub ensemble_file: String,
    pub sha256: String,
}

/// Everything fitted from one ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub drift_f: Option<DriftEstimate>,
    pub drift_g: Option<DriftEstimate>,
    pub kernel: Option<KernelEstimate>,
    pub diffusion: DiffusionEstimate,
    /// Per-entry `σ̂` as reported.
    pub sigma_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub experiment: String,
    pub model: String,
    pub metrics: MetricReport,
    pub sigma_hat: Vec<f64>,
    /// Model-specific quantities such as kernel error and invariant checks.
    pub extra: BTreeMap<String, f64>,
}

impl ReportFile {
    /// All scalar metrics by name, as referenced from `checks` and `published`.
    pub fn named_metrics(&self) -> BTreeMap<String, f64> {
        let r = &self.metrics;
        let mut out = BTreeMap::from([
            ("relative_l2_rho".to_string(), r.relative_l2_rho),
            ("absolute_l2_rho".to_string(), r.absolute_l2_rho),
            ("trajectory_error_mean".to_string(), r.trajectory_error_mean),
            ("trajectory_error_std".to_string(), r.trajectory_error_std),
            ("trajectory_error_absolute".to_string(), r.trajectory_error_absolute),
        ]);
        for w in &r.wasserstein {
            out.insert(format!("w2_t{}", w.time), w.distance);
        }
        for (i, s) in self.sigma_hat.iter().enumerate() {
            out.insert(format!("sigma_hat_{i}"), *s);
        }
        out.extend(self.extra.iter().map(|(k, v)| (k.clone(), *v)));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub metric: String,
    pub value: f64,
    pub expected: String,
    pub pass: bool,
    pub blocking: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedComparison {
    pub metric: String,
    pub value: f64,
    pub published: f64,
    pub ratio: f64,
    pub within_3x: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub model: String,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<CheckOutcome>,
    pub published: Vec<PublishedComparison>,
    /// True when every blocking check passed.
    pub passed: bool,
}

impl Summary {
    pub fn to_text(&self, digits: usize) -> String {
        let mut s = format!("experiment {} (model {})\n", self.experiment, self.model);
        for c in &self.checks {
            let tag = match (c.pass, c.blocking) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "WARN",
            };
            let _ = writeln!(s, "{tag} {} = {} (expected {})", c.metric, format_sig(c.value, digits), c.expected);
        }
        for p in &self.published {
            let _ = writeln!(
                s,
                "INFO {} = {} vs published {} (ratio {:.2}, {})",
                p.metric,
                format_sig(p.value, digits),
                p.published,
                p.ratio,
                if p.within_3x { "within 3x" } else { "outside 3x" }
            );
        }
        let _ = writeln!(s, "{}", if self.passed { "RESULT PASS" } else { "RESULT FAIL" });
        s
    }
}

/// A validated config bound to its model.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: BuiltinModel,
    pub truth: ModelSystem,
}

fn collect_features(ens: &TrajectoryEnsemble, feature: &(dyn Fn(&[f64], &mut [f64]) + Send + Sync), dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; ens.n_trajectories * ens.n_times() * dim];
    for (z, o) in ens.all_states().zip(out.chunks_exact_mut(dim)) {
        feature(z, o);
    }
    out
}

fn check_basis(cfg: &Option<BasisConfig>, field: &str, dim: usize) -> Result<()> {
    match cfg {
        None => Err(Error::config(field, "required for this model")),
        Some(b) if b.dims.len() != dim => Err(Error::config(
            format!("{field}.dims"),
            format!("expected {dim} entries, got {}", b.dims.len()),
        )),
        Some(b) if !(b.padding_fraction >= 0.0) => Err(Error::config(
            format!("{field}.padding_fraction"),
            "must be non-negative",
        )),
        Some(_) => Ok(()),
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let model = BuiltinModel::from_params(&config.model.name, &config.model.params)?;
        let truth = model.build()?;
        let exp = Experiment { config, model, truth };
        exp.validate()?;
        Ok(exp)
    }

    pub fn is_cucker_smale(&self) -> bool {
        matches!(self.model, BuiltinModel::CuckerSmale { .. })
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        let dims = self.truth.dims;
        let s = &c.simulation;
        if !(s.horizon > 0.0) {
            return Err(Error::config("simulation.horizon", "must be positive"));
        }
        if !(s.dt > 0.0) {
            return Err(Error::config("simulation.dt", "must be positive"));
        }
        if s.n_trajectories == 0 {
            return Err(Error::config("simulation.n_trajectories", "must be at least 1"));
        }
        self.simulation_config()
            .validate(&dims)
            .map_err(|e| match e {
                Error::Config { .. } => e,
                other => Error::config("simulation", other.to_string()),
            })?;
        if self.is_cucker_smale() {
            let k = c
                .kernel
                .as_ref()
                .ok_or_else(|| Error::config("kernel", "required for cucker_smale"))?;
            if k.segments == 0 {
                return Err(Error::config("kernel.segments", "must be at least 1"));
            }
            if c.diffusion.model_class != DiffusionClass::ConstantMatrix {
                return Err(Error::config(
                    "diffusion.model_class",
                    "cucker_smale learns a constant σ",
                ));
            }
        } else {
            check_basis(&c.basis_f, "basis_f", dims.feature_f)?;
            check_basis(&c.basis_g, "basis_g", dims.feature_g)?;
        }
        if c.diffusion.model_class == DiffusionClass::DiagonalStateDependent {
            check_basis(&c.diffusion.basis, "diffusion.basis", dims.y)?;
        }
        for (i, t) in c.snapshot_times.iter().enumerate() {
            if !(*t >= 0.0 && *t <= s.horizon * (1.0 + 1e-12)) {
                return Err(Error::config(format!("snapshot_times[{i}]"), format!("{t} is outside [0, {}]", s.horizon)));
            }
        }
        if !(1..=17).contains(&c.report_precision) {
            return Err(Error::config("report_precision", "must be between 1 and 17"));
        }
        if c.wasserstein.m_exact == 0 || !(c.wasserstein.eps_factor > 0.0) {
            return Err(Error::config("wasserstein", "m_exact and eps_factor must be positive"));
        }
        for (i, ch) in c.checks.iter().enumerate() {
            ch.validate(i)?;
        }
        Ok(())
    }

    pub fn simulation_config(&self) -> SimulationConfig {
        self.config.simulation_config(&self.model)
    }

    pub fn simulate(&self) -> Result<TrajectoryEnsemble> {
        simulate_ensemble(&self.truth, &self.simulation_config())
    }

    fn check_ensemble(&self, ens: &TrajectoryEnsemble) -> Result<()> {
        if ens.dims != self.truth.dims {
            return Err(Error::Contract(format!(
                "ensemble dimensions {:?} do not match model '{}' {:?}",
                ens.dims,
                self.model.name(),
                self.truth.dims
            )));
        }
        Ok(())
    }

    fn fit_diffusion(&self, ens: &TrajectoryEnsemble, source: Increments) -> Result<DiffusionEstimate> {
        match self.config.diffusion.model_class {
            DiffusionClass::ConstantMatrix => fit_sigma_constant(&qv_with(ens, source)),
            DiffusionClass::DiagonalStateDependent => {
                let dx = ens.dims.x;
                let select_y = move |z: &[f64], out: &mut [f64]| out.copy_from_slice(&z[dx..]);
                let y = collect_features(ens, &select_y, ens.dims.y);
                let cfg = self.config.diffusion.basis.as_ref().expect("validated");
                let lib = cfg.build_from_data(y.chunks_exact(ens.dims.y))?;
                fit_sigma_state_dependent_with(ens, &select_y, lib, source, &self.config.regularization)
            }
        }
    }

    fn sigma_hat(&self, ens: &TrajectoryEnsemble, diffusion: &DiffusionEstimate) -> Vec<f64> {
        let dy = ens.dims.y;
        let mut mean_y = vec![0.0; dy];
        if matches!(diffusion, DiffusionEstimate::DiagonalStateDependent(_)) {
            let n = (ens.n_trajectories * ens.n_times()) as f64;
            for z in ens.all_states() {
                for (m, v) in mean_y.iter_mut().zip(&z[ens.dims.x..]) {
                    *m += v / n;
                }
            }
        }
        diffusion.sigma_display(&mean_y)
    }

    /// `Σ̂` from raw increments, then `f̂` and `ĝ`, then optionally `Σ̂`
    /// again from drift-compensated increments.
    pub fn fit(&self, ens: &TrajectoryEnsemble) -> Result<Estimates> {
        self.check_ensemble(ens)?;
        if self.is_cucker_smale() {
            return self.fit_cucker_smale(ens);
        }
        let dims = self.truth.dims;
        let opts = &self.config.regularization;
        let ff = collect_features(ens, &*self.truth.feature_f, dims.feature_f);
        let lib_f = self.config.basis_f.as_ref().expect("validated").build_from_data(ff.chunks_exact(dims.feature_f))?;
        drop(ff);
        let fg = collect_features(ens, &*self.truth.feature_g, dims.feature_g);
        let lib_g = self.config.basis_g.as_ref().expect("validated").build_from_data(fg.chunks_exact(dims.feature_g))?;
        drop(fg);

        let raw = self.fit_diffusion(ens, Increments::Raw)?;
        let drift_f = fit_f(ens, &*self.truth.feature_f, lib_f, opts)?;
        let drift_g = fit_g(ens, &*self.truth.feature_g, lib_g, DiffusionWeight::Estimate(&raw), opts)?;
        let diffusion = if self.config.diffusion.compensate_drift {
            let feature_g = self.truth.feature_g.clone();
            let g_hat = &drift_g;
            let y_drift = move |z: &[f64], out: &mut [f64]| {
                let mut feat = vec![0.0; dims.feature_g];
                feature_g(z, &mut feat);
                g_hat.evaluate_into(&feat, &mut SparseRow::default(), out);
            };
            self.fit_diffusion(ens, Increments::Compensated(&y_drift))?
        } else {
            raw
        };
        let sigma_hat = self.sigma_hat(ens, &diffusion);
        Ok(Estimates {
            drift_f: Some(drift_f),
            drift_g: Some(drift_g),
            kernel: None,
            diffusion,
            sigma_hat,
        })
    }

    fn cs_dims(&self) -> (usize, usize) {
        match self.model {
            BuiltinModel::CuckerSmale { n_agents, dim, .. } => (n_agents, dim),
            _ => (0, 0),
        }
    }

    fn fit_cucker_smale(&self, ens: &TrajectoryEnsemble) -> Result<Estimates> {
        let (n, d) = self.cs_dims();
        let k = self.config.kernel.as_ref().expect("validated");
        let lib = kernel_library(kernel_r_max(ens, n, d)?, k.segments, k.degree)?;
        let kernel = fit_cs_kernel(ens, n, d, lib, &self.config.regularization)?;
        let diffusion = if self.config.diffusion.compensate_drift {
            let spec = estimated_cs_spec(n, d, &kernel, 0.0);
            let nd = n * d;
            let y_drift = move |z: &[f64], out: &mut [f64]| cs_drift(&spec, &z[..nd], &z[nd..], out);
            fit_sigma_constant(&cs_stacked_qv(ens, Increments::Compensated(&y_drift)))?
        } else {
            fit_sigma_constant(&cs_stacked_qv(ens, Increments::Raw))?
        };
        let sigma_hat = diffusion.sigma_display(&[]);
        Ok(Estimates {
            drift_f: None,
            drift_g: None,
            kernel: Some(kernel),
            diffusion,
            sigma_hat,
        })
    }

    /// The fitted mSDE: truth's feature maps with `f̂`, `ĝ` and `σ̂`.
    pub fn estimated_model(&self, est: &Estimates) -> Result<ModelSystem> {
        if self.is_cucker_smale() {
            let (n, d) = self.cs_dims();
            let kernel = est
                .kernel
                .as_ref()
                .ok_or_else(|| Error::Contract("kernel estimate missing".into()))?;
            let sigma = est.sigma_hat.first().copied().unwrap_or(0.0);
            return Ok(cucker_smale_system(&estimated_cs_spec(n, d, kernel, sigma)));
        }
        let (f, g) = match (&est.drift_f, &est.drift_g) {
            (Some(f), Some(g)) => (f.clone(), g.clone()),
            _ => return Err(Error::Contract("drift estimates missing".into())),
        };
        let dims = self.truth.dims;
        if f.output_dim != dims.x || g.output_dim != dims.y || est.diffusion.dim() != dims.y {
            return Err(Error::Contract("estimates do not match the model dimensions".into()));
        }
        if f.library.dims_in() != dims.feature_f || g.library.dims_in() != dims.feature_g {
            return Err(Error::Contract("estimate libraries do not match the feature dimensions".into()));
        }
        Ok(self
            .truth
            .with_drifts(Arc::new(f).into_map(), Arc::new(g).into_map())
            .with_diffusion(Arc::new(est.diffusion.clone()).into_sigma_map()))
    }

    /// Scores `estimate` against the truth on `ens`; returns the report and
    /// the replayed ensemble.
    pub fn evaluate_model(&self, ens: &TrajectoryEnsemble, estimate: &ModelSystem) -> Result<(MetricReport, TrajectoryEnsemble)> {
        self.check_ensemble(ens)?;
        let rho = OccupationMeasure::from_ensemble(ens);
        let l2 = l2_rho_error_models(&self.truth, estimate, &rho)?;
        let replay = replay_ensemble(estimate, ens)?;
        let traj = trajectory_error(ens, &replay)?;
        let wasserstein = wasserstein_curve(ens, &replay, &self.config.snapshot_times, &self.config.wasserstein)?;
        let report = MetricReport {
            relative_l2_rho: l2.relative.unwrap_or(l2.absolute),
            absolute_l2_rho: l2.absolute,
            trajectory_error_mean: traj.mean,
            trajectory_error_std: traj.std,
            trajectory_error_absolute: traj.absolute,
            wasserstein,
            coupling: COUPLING_NOTE.to_string(),
        };
        report.validate()?;
        Ok((report, replay))
    }

    /// Full evaluation of fitted estimates, including model-specific extras.
    pub fn evaluate(&self, ens: &TrajectoryEnsemble, est: &Estimates) -> Result<(ReportFile, TrajectoryEnsemble)> {
        let model = self.estimated_model(est)?;
        let (metrics, replay) = self.evaluate_model(ens, &model)?;
        let mut extra = BTreeMap::new();
        if self.is_cucker_smale() {
            let (n, d) = self.cs_dims();
            let truth = self.model.cucker_smale_spec()?;
            let phi = truth.kernel_phi.clone();
            let kernel = est.kernel.as_ref().expect("checked by estimated_model");
            extra.insert("kernel_l2".into(), kernel_l2_error(kernel, &move |r| phi(r), ens, n, d)?);
            let (momentum, violations) = self.cs_invariants()?;
            extra.insert("momentum_drift".into(), momentum);
            extra.insert("flocking_violations".into(), violations as f64);
        }
        let file = ReportFile {
            experiment: self.config.name.clone(),
            model: self.model.name().to_string(),
            metrics,
            sigma_hat: est.sigma_hat.clone(),
            extra,
        };
        Ok((file, replay))
    }

    /// Zero-noise Cucker–Smale paths: largest mean-velocity drift per unit
    /// time and the number of steps where the velocity spread grew.
    pub fn cs_invariants(&self) -> Result<(f64, usize)> {
        let (n, d) = self.cs_dims();
        let k = self.config.kernel.as_ref().expect("validated");
        let spec = self.model.cucker_smale_spec()?;
        let quiet = cucker_smale_system(&CuckerSmaleSpec::new(n, d, spec.kernel_phi, 0.0));
        let mut cfg = self.simulation_config();
        cfg.n_trajectories = k.invariant_trajectories.max(1);
        let ens = simulate_ensemble(&quiet, &cfg)?;
        let mut violations = 0;
        for m in 0..ens.n_trajectories {
            let spread: Vec<f64> = (0..ens.n_times()).map(|l| velocity_spread(ens.state(m, l), n, d)).collect();
            violations += spread.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();
        }
        Ok((momentum_drift(&ens, n, d), violations))
    }

    pub fn summarize(&self, report: &ReportFile) -> Result<Summary> {
        let metrics = report.named_metrics();
        let lookup = |name: &str, path: String| {
            metrics
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(path, format!("unknown metric '{name}'")))
        };
        let checks = self
            .config
            .checks
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let value = lookup(&c.metric, format!("checks[{i}].metric"))?;
                Ok(CheckOutcome {
                    metric: c.metric.clone(),
                    value,
                    expected: c.describe(),
                    pass: c.passes(value),
                    blocking: c.blocking,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let published = self
            .config
            .published
            .iter()
            .map(|(name, &published)| {
                let value = lookup(name, format!("published.{name}"))?;
                let ratio = value / published;
                Ok(PublishedComparison {
                    metric: name.clone(),
                    value,
                    published,
                    ratio,
                    within_3x: (1.0 / 3.0..=3.0).contains(&ratio),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let passed = checks.iter().all(|c| c.pass || !c.blocking);
        Ok(Summary {
            experiment: self.config.name.clone(),
            model: self.model.name().to_string(),
            metrics,
            checks,
            published,
            passed,
        })
    }
}

fn estimated_cs_spec(n: usize, d: usize, kernel: &KernelEstimate, sigma: f64) -> CuckerSmaleSpec {
    let k = kernel.clone();
    CuckerSmaleSpec::new(n, d, Arc::new(move |r| k.evaluate(r)), sigma)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Simulates and writes `ensemble.bin` plus `manifest.json`.
pub fn cmd_simulate(exp: &Experiment, layout: &OutputLayout) -> Result<(TrajectoryEnsemble, Manifest)> {
    let ens = exp.simulate()?;
    ensemble_io::save(&ens, &layout.ensemble())?;
    let manifest = Manifest {
        experiment: exp.config.name.clone(),
        model: exp.model.name().to_string(),
        seed: ens.seed,
        dims: ens.dims,
        n_trajectories: ens.n_trajectories,
        n_times: ens.n_times(),
        dt: ens.dt,
        horizon: ens.horizon(),
        ensemble_file: "ensemble.bin".into(),
        sha256: sha256_file(&layout.ensemble())?,
    };
    atomic_write_str(&layout.manifest(), &to_json(&manifest)?)?;
    Ok((ens, manifest))
}

pub fn write_estimates(est: &Estimates, layout: &OutputLayout) -> Result<()> {
    if let Some(f) = &est.drift_f {
        atomic_write_str(&layout.drift_f(), &(f.to_json()? + "\n"))?;
    }
    if let Some(g) = &est.drift_g {
        atomic_write_str(&layout.drift_g(), &(g.to_json()? + "\n"))?;
    }
    if let Some(k) = &est.kernel {
        atomic_write_str(&layout.kernel(), &to_json(k)?)?;
    }
    atomic_write_str(&layout.diffusion(), &to_json(&est.diffusion)?)
}

pub fn read_estimates(exp: &Experiment, ens: &TrajectoryEnsemble, layout: &OutputLayout) -> Result<Estimates> {
    let read_drift = |p: PathBuf| -> Result<DriftEstimate> {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        DriftEstimate::from_json(&text)
    };
    let diffusion: DiffusionEstimate = read_json(&layout.diffusion())?;
    let (drift_f, drift_g, kernel) = if exp.is_cucker_smale() {
        (None, None, Some(read_json(&layout.kernel())?))
    } else {
        (Some(read_drift(layout.drift_f())?), Some(read_drift(layout.drift_g())?), None)
    };
    let sigma_hat = if exp.is_cucker_smale() {
        diffusion.sigma_display(&[])
    } else {
        exp.sigma_hat(ens, &diffusion)
    };
    Ok(Estimates {
        drift_f,
        drift_g,
        kernel,
        diffusion,
        sigma_hat,
    })
}

/// Loads an ensemble, fits, and writes the estimate files.
pub fn cmd_fit(exp: &Experiment, ensemble: &Path, layout: &OutputLayout) -> Result<Estimates> {
    let ens = ensemble_io::load(ensemble)?;
    let est = exp.fit(&ens)?;
    write_estimates(&est, layout)?;
    Ok(est)
}

fn write_plots(exp: &Experiment, ens: &TrajectoryEnsemble, replay: &TrajectoryEnsemble, report: &ReportFile, est: &Estimates, layout: &OutputLayout) -> Result<()> {
    let dir = layout.plots();
    let mut w2 = String::from("time,w2,approximate\n");
    for p in &report.metrics.wasserstein {
        let _ = writeln!(w2, "{},{},{}", p.time, p.distance, p.approximate);
    }
    atomic_write_str(&dir.join("w2_curve.csv"), &w2)?;

    let d = ens.dims.total;
    let mut paths = String::from("time");
    for k in 0..d {
        let _ = write!(paths, ",state_{k}");
    }
    for k in 0..d {
        let _ = write!(paths, ",replay_{k}");
    }
    paths.push('\n');
    for (l, t) in ens.times.iter().enumerate() {
        let _ = write!(paths, "{t}");
        for v in ens.state(0, l).iter().chain(replay.state(0, l)) {
            let _ = write!(paths, ",{v}");
        }
        paths.push('\n');
    }
    atomic_write_str(&dir.join("sample_path.csv"), &paths)?;

    if let Some(k) = &est.kernel {
        let phi = exp.model.cucker_smale_spec()?.kernel_phi;
        let points = exp.config.kernel.as_ref().map_or(201, |k| k.csv_points);
        atomic_write_str(&dir.join("kernel.csv"), &k.to_csv(&|r| phi(r), points))?;
    }
    if let Some(g) = est.drift_g.as_ref().filter(|g| g.library.dims_in() == 2) {
        atomic_write_str(&dir.join("drift_g_grid.csv"), &g_grid_csv(exp, g, 41))?;
    }
    Ok(())
}

/// `g` and `ĝ` on an `n × n` grid over the fitted basis box.
fn g_grid_csv(exp: &Experiment, g: &DriftEstimate, n: usize) -> String {
    let bbox = g.library.bounding_box();
    let k = g.output_dim;
    let mut s = String::from("u0,u1");
    for j in 0..k {
        let _ = write!(s, ",g_{j},g_hat_{j}");
    }
    s.push('\n');
    let mut truth = vec![0.0; k];
    for a in 0..n {
        for b in 0..n {
            let at = |i: usize, t: usize| bbox.lower[i] + (bbox.upper[i] - bbox.lower[i]) * t as f64 / (n - 1) as f64;
            let u = [at(0, a), at(1, b)];
            (exp.truth.drift_g)(&u, &mut truth);
            let est = g.evaluate(&u);
            let _ = write!(s, "{},{}", u[0], u[1]);
            for j in 0..k {
                let _ = write!(s, ",{},{}", truth[j], est[j]);
            }
            s.push('\n');
        }
    }
    s
}

/// Loads ensemble and estimates, evaluates, and writes the report and plot data.
pub fn cmd_evaluate(exp: &Experiment, ensemble: &Path, layout: &OutputLayout) -> Result<ReportFile> {
    let ens = ensemble_io::load(ensemble)?;
    let est = read_estimates(exp, &ens, layout)?;
    evaluate_and_write(exp, &ens, &est, layout)
}

fn evaluate_and_write(exp: &Experiment, ens: &TrajectoryEnsemble, est: &Estimates, layout: &OutputLayout) -> Result<ReportFile> {
    let (report, replay) = exp.evaluate(ens, est)?;
    atomic_write_str(&layout.report_json(), &to_json(&report)?)?;
    let csv = format!(
        "{}\n{}\n",
        report.metrics.csv_header(),
        report.metrics.csv_row(exp.config.report_precision)
    );
    atomic_write_str(&layout.report_csv(), &csv)?;
    write_plots(exp, ens, &replay, &report, est, layout)?;
    Ok(report)
}

/// The whole pipeline plus `summary.json` / `summary.txt`.
pub fn cmd_reproduce(exp: &Experiment, layout: &OutputLayout) -> Result<Summary> {
    let (ens, _) = cmd_simulate(exp, layout)?;
    let est = exp.fit(&ens)?;
    write_estimates(&est, layout)?;
    let report = evaluate_and_write(exp, &ens, &est, layout)?;
    let summary = exp.summarize(&report)?;
    atomic_write_str(&layout.summary_json(), &to_json(&summary)?)?;
    atomic_write_str(&layout.summary_txt(), &summary.to_text(exp.config.report_precision))?;
    Ok(summary)
}

/// `Σ̂` as printed after fitting.
pub fn describe_diffusion(est: &Estimates, digits: usize) -> String {
    let mut s = String::new();
    for (i, v) in est.sigma_hat.iter().enumerate() {
        let _ = writeln!(s, "sigma_hat_{i} = {}", format_sig(*v, digits));
    }
    if est.diffusion.is_degenerate() {
        s.push_str("diffusion is degenerate (all quadratic variations are zero)\n");
    }
    if let DiffusionEstimate::ConstantMatrix(c) = &est.diffusion {
        if c.sigma_cov.nrows() > 1 && c.sigma_cov.nrows() <= 4 {
            let _ = writeln!(s, "Sigma_hat = {:?}", matrix_rows::to_rows(&c.sigma_cov));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse_and_validate() {
        for (name, scale, _) in BUNDLED {
            let cfg = bundled_config(name, scale.parse().unwrap()).unwrap();
            assert_eq!(cfg.model.name, name);
            Experiment::new(cfg).unwrap();
        }
    }

    #[test]
    fn config_round_trips() {
        for (name, scale, _) in BUNDLED {
            let cfg = bundled_config(name, scale.parse().unwrap()).unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut cfg = bundled_config("toy", Scale::Desk).unwrap();
        cfg.simulation.dt = -1.0;
        match Experiment::new(cfg) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "simulation.dt"),
            other => panic!("{other:?}"),
        }
        let text = bundled_config_text("toy", Scale::Desk).unwrap().replace("[simulation]", "[simulation]\nbogus = 1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config { .. })));
        let mut cfg = bundled_config("toy", Scale::Desk).unwrap();
        cfg.snapshot_times.push(5.0);
        assert!(matches!(Experiment::new(cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn check_bounds() {
        let c = Check {
            metric: "x".into(),
            target: Some(0.08),
            tolerance: Some(0.03),
            relative: true,
            max: None,
            blocking: true,
        };
        assert!(c.passes(0.0823) && !c.passes(0.0825));
        let c = Check { target: None, tolerance: None, max: Some(0.05), relative: false, ..c };
        assert!(c.passes(0.05) && !c.passes(f64::NAN));
    }
}
