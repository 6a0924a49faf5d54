#![allow(dead_code)]

use std::sync::Arc;

use itertools::Itertools;
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use msde::basis::{BasisConfig, SparseRow};
use msde::drift::{fit_f, fit_g, FeatureFn};
use msde::metrics::{l2_rho_error_models, OccupationMeasure};
use msde::{
    Basis, BasisFamily, BasisLibrary, DiffusionWeight, FitOptions, InitialDistribution, ModelSystem, SimulationConfig,
    TrajectoryEnsemble,
};
use nalgebra::DMatrix;

pub fn simulate(model: &ModelSystem, horizon: f64, dt: f64, m: usize, seed: u64) -> TrajectoryEnsemble {
    let cfg = SimulationConfig {
        horizon,
        dt,
        n_trajectories: m,
        seed,
        initial: InitialDistribution::unit_box(model.dims.total),
    };
    msde::simulate_ensemble(model, &cfg).unwrap()
}

/// Feature vectors `ξ(z)` for every observed state, flattened.
pub fn features(ens: &TrajectoryEnsemble, model: &ModelSystem, f_block: bool) -> (Vec<f64>, usize) {
    let (map, dim) = if f_block {
        (&model.feature_f, model.dims.feature_f)
    } else {
        (&model.feature_g, model.dims.feature_g)
    };
    let mut out = vec![0.0; ens.n_trajectories * ens.n_times() * dim];
    for (z, o) in ens.all_states().zip(out.chunks_exact_mut(dim)) {
        map(z, o);
    }
    (out, dim)
}

/// Quadratic B-spline library with `segments` per axis over the feature data.
pub fn bspline_lib(ens: &TrajectoryEnsemble, model: &ModelSystem, f_block: bool, segments: usize) -> BasisLibrary {
    let (feat, dim) = features(ens, model, f_block);
    BasisConfig::uniform(BasisFamily::Bspline, 2, segments, dim)
        .build_from_data(feat.chunks_exact(dim))
        .unwrap()
}

/// Simple deterministic generator for test inputs that need no statistics.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn points(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }
}

/// `∏ z_i^{e_i}` for each exponent vector.
#[derive(Debug, Clone)]
pub struct Monomials(pub Vec<Vec<i32>>);

impl Basis for Monomials {
    fn dims_in(&self) -> usize {
        self.0[0].len()
    }

    fn len(&self) -> usize {
        self.0.len()
    }

    fn eval_sparse(&self, point: &[f64], row: &mut SparseRow) {
        row.clear();
        for (i, e) in self.0.iter().enumerate() {
            row.push(i, e.iter().zip(point).map(|(&k, &z)| z.powi(k)).product());
        }
    }
}

/// Dense least squares of `Δblock/Δt` on `lib(ξ(z_l))`, solved from the
/// explicitly formed normal equations.
pub fn dense_oracle<B: Basis>(ens: &TrajectoryEnsemble, feature: FeatureFn, feat_dim: usize, lib: &B, x_block: bool) -> DMatrix<f64> {
    let dx = ens.dims.x;
    let (lo, k) = if x_block { (0, dx) } else { (dx, ens.dims.y) };
    let p = lib.len();
    let n = ens.n_trajectories * (ens.n_times() - 1);
    let mut a = DMatrix::zeros(n, p);
    let mut b = DMatrix::zeros(n, k);
    let mut feat = vec![0.0; feat_dim];
    let mut phi = vec![0.0; p];
    let mut r = 0;
    for m in 0..ens.n_trajectories {
        for l in 0..ens.n_times() - 1 {
            let (z0, z1) = (ens.state(m, l), ens.state(m, l + 1));
            feature(z0, &mut feat);
            lib.eval_into(&feat, &mut phi);
            for (j, v) in phi.iter().enumerate() {
                a[(r, j)] = *v;
            }
            for j in 0..k {
                b[(r, j)] = (z1[lo + j] - z0[lo + j]) / ens.dt_at(l);
            }
            r += 1;
        }
    }
    let ata = a.transpose() * &a;
    let atb = a.transpose() * &b;
    ata.lu().solve(&atb).unwrap()
}

/// Relative `L²(ρ)` error of drifts fitted on `ens` with quadratic B-splines.
pub fn fitted_l2(model: &ModelSystem, ens: &TrajectoryEnsemble, segments: usize) -> f64 {
    let opts = FitOptions::default();
    let f = fit_f(ens, &*model.feature_f, bspline_lib(ens, model, true, segments), &opts).unwrap();
    let g = fit_g(ens, &*model.feature_g, bspline_lib(ens, model, false, segments), DiffusionWeight::Identity, &opts).unwrap();
    let est = model.with_drifts(Arc::new(f).into_map(), Arc::new(g).into_map());
    let e = l2_rho_error_models(model, &est, &OccupationMeasure::from_ensemble(ens)).unwrap();
    e.relative.unwrap()
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum over all `M!` matchings.
pub fn brute_force_w2(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let n = a.len() / dim;
    let best = (0..n)
        .permutations(n)
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(i, &j)| sq(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    (best / n as f64).sqrt()
}

/// Transport LP with uniform marginals `1/M`.
pub fn lp_w2(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let n = a.len() / dim;
    let mut pb = Problem::new(OptimizationDirection::Minimize);
    let mut vars = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            vars.push(pb.add_var(sq(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]), (0.0, f64::INFINITY)));
        }
    }
    let w = 1.0 / n as f64;
    for i in 0..n {
        pb.add_constraint((0..n).map(|j| (vars[i * n + j], 1.0)), ComparisonOp::Eq, w);
    }
    for j in 0..n {
        pb.add_constraint((0..n).map(|i| (vars[i * n + j], 1.0)), ComparisonOp::Eq, w);
    }
    pb.solve().unwrap().objective().max(0.0).sqrt()
}

pub fn sorted_quantile_w2(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    (a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

