//! Linear least squares through accumulated normal equations.
//!
//! Rows are streamed into `G = Σ w φφᵀ` and `B = Σ w φ yᵀ`, normalized by the
//! row count, then solved once. Assembly runs over fixed-size trajectory
//! chunks reduced pairwise in chunk order, so results do not depend on the
//! number of threads.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SparseRow;
use crate::error::{Error, Result};

/// Trajectories per assembly chunk.
pub const CHUNK: usize = 8;
/// Relative eigenvalue cutoff of the default truncated-SVD solve.
pub const DEFAULT_SVD_CUTOFF: f64 = 1e-10;
/// Condition number above which an unregularized solve is refused.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "strength", rename_all = "snake_case")]
pub enum Regularization {
    None,
    /// Adds `strength · I` to the normalized Gram matrix.
    Ridge(f64),
    /// Drops eigen-directions below `strength · λ_max`.
    TruncatedSvd(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::TruncatedSvd(DEFAULT_SVD_CUTOFF)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    #[serde(default)]
    pub regularization: Regularization,
    /// Optional radius of a Euclidean ball on each coefficient column.
    #[serde(default)]
    pub coefficient_bound: Option<f64>,
}

/// Accumulated normal equations for `k` outputs over `p` basis functions.
///
/// With a shared Gram matrix all outputs use one `G`; otherwise output `j`
/// has its own `G_j`, needed when rows carry per-output weights.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub grams: Vec<DMatrix<f64>>,
    pub rhs: DMatrix<f64>,
    pub rows: usize,
}

impl NormalEquations {
    pub fn new(p: usize, k: usize, shared: bool) -> Self {
        let n_grams = if shared { 1 } else { k };
        NormalEquations {
            grams: vec![DMatrix::zeros(p, p); n_grams],
            rhs: DMatrix::zeros(p, k),
            rows: 0,
        }
    }

    pub fn n_basis(&self) -> usize {
        self.rhs.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.rhs.ncols()
    }

    pub fn is_shared(&self) -> bool {
        self.grams.len() == 1
    }

    /// Adds one sample `φ` with targets `y` (length `k`). The upper triangle
    /// of each Gram matrix is filled; [`Self::finish`] mirrors it.
    pub fn add(&mut self, phi: &SparseRow, targets: &[f64], weights: Option<&[f64]>) {
        self.rows += 1;
        if self.is_shared() {
            add_outer(&mut self.grams[0], phi, 1.0);
            for (i, v) in phi.iter() {
                for (j, y) in targets.iter().enumerate() {
                    self.rhs[(i, j)] += v * y;
                }
            }
        } else {
            for (j, y) in targets.iter().enumerate() {
                let w = weights.map_or(1.0, |w| w[j]);
                add_outer(&mut self.grams[j], phi, w);
                for (i, v) in phi.iter() {
                    self.rhs[(i, j)] += w * v * y;
                }
            }
        }
    }

    /// Adds a dense row for a single output `j`.
    pub fn add_dense(&mut self, phi: &[f64], target: f64, output: usize) {
        self.rows += 1;
        let g = if self.is_shared() { 0 } else { output };
        let p = phi.len();
        for a in 0..p {
            if phi[a] == 0.0 {
                continue;
            }
            for b in a..p {
                self.grams[g][(a, b)] += phi[a] * phi[b];
            }
            self.rhs[(a, output)] += phi[a] * target;
        }
    }

    pub fn merge(&mut self, other: &NormalEquations) {
        for (g, o) in self.grams.iter_mut().zip(&other.grams) {
            *g += o;
        }
        self.rhs += &other.rhs;
        self.rows += other.rows;
    }

    /// Symmetrizes and divides by the row count.
    pub fn finish(mut self) -> Self {
        let scale = 1.0 / self.rows.max(1) as f64;
        for g in &mut self.grams {
            let p = g.nrows();
            for a in 0..p {
                for b in 0..a {
                    g[(a, b)] = g[(b, a)];
                }
            }
            *g *= scale;
        }
        self.rhs *= scale;
        self
    }

    fn gram(&self, output: usize) -> &DMatrix<f64> {
        if self.is_shared() {
            &self.grams[0]
        } else {
            &self.grams[output]
        }
    }

    /// Solves every output column; the result is `p × k`.
    pub fn solve(&self, options: &FitOptions) -> Result<DMatrix<f64>> {
        let (p, k) = (self.n_basis(), self.n_outputs());
        let mut coef = DMatrix::zeros(p, k);
        let mut shared_eig = None;
        for j in 0..k {
            let g = self.gram(j);
            let eig = if self.is_shared() {
                shared_eig.get_or_insert_with(|| SymmetricEigen::new(g.clone())).clone()
            } else {
                SymmetricEigen::new(g.clone())
            };
            let b = self.rhs.column(j).into_owned();
            let c = solve_column(g, &eig, &b, options)?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("fitted coefficients"));
            }
            coef.set_column(j, &c);
        }
        Ok(coef)
    }

    /// `max_j ‖G_j c_j − b_j‖`, the gradient of the normalized loss.
    pub fn gradient_norm(&self, coef: &DMatrix<f64>) -> f64 {
        (0..self.n_outputs())
            .map(|j| (self.gram(j) * coef.column(j) - self.rhs.column(j)).norm())
            .fold(0.0, f64::max)
    }
}

fn add_outer(g: &mut DMatrix<f64>, phi: &SparseRow, w: f64) {
    for (a, va) in phi.iter() {
        let wa = w * va;
        for (b, vb) in phi.iter() {
            if b >= a {
                g[(a, b)] += wa * vb;
            }
        }
    }
}

fn solve_column(
    g: &DMatrix<f64>,
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    b: &DVector<f64>,
    options: &FitOptions,
) -> Result<DVector<f64>> {
    let lam = &eig.eigenvalues;
    let lmax = lam.iter().copied().fold(0.0f64, f64::max);
    let lmin = lam.iter().copied().fold(f64::INFINITY, f64::min);
    let proj = eig.eigenvectors.transpose() * b;
    // spectral solve with per-direction shift, masked directions dropped
    let spectral = |shift: f64, keep: &dyn Fn(f64) -> bool| -> DVector<f64> {
        let mut c = DVector::zeros(b.len());
        for (i, &l) in lam.iter().enumerate() {
            if keep(l) {
                c += eig.eigenvectors.column(i) * (proj[i] / (l + shift));
            }
        }
        c
    };
    if lmax <= 0.0 {
        // all-zero design: the minimum-norm solution is zero
        return Ok(DVector::zeros(b.len()));
    }
    let (c, keep, shift): (DVector<f64>, Box<dyn Fn(f64) -> bool>, f64) = match options.regularization {
        Regularization::None => {
            let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
            if condition > MAX_CONDITION {
                return Err(Error::IllConditioned { condition });
            }
            let c = g
                .clone()
                .cholesky()
                .ok_or(Error::IllConditioned { condition })?
                .solve(b);
            (c, Box::new(|_| true), 0.0)
        }
        Regularization::Ridge(mu) => {
            if !(mu >= 0.0) {
                return Err(Error::config("regularization.strength", "ridge strength must be non-negative"));
            }
            if mu == 0.0 && lmin <= 0.0 {
                return Err(Error::IllConditioned { condition: f64::INFINITY });
            }
            (spectral(mu, &|_| true), Box::new(|_| true), mu)
        }
        Regularization::TruncatedSvd(cut) => {
            let thresh = cut * lmax;
            let keep = move |l: f64| l > thresh;
            (spectral(0.0, &keep), Box::new(keep), 0.0)
        }
    };
    match options.coefficient_bound {
        Some(r) if c.norm() > r => {
            // ‖c(μ)‖ decreases in the extra shift μ; bisect for ‖c(μ)‖ = r
            let mut lo = 0.0;
            let mut hi = lmax.max(1e-300);
            while spectral(shift + hi, &*keep).norm() > r {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if spectral(shift + mid, &*keep).norm() > r {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-14 * hi {
                    break;
                }
            }
            Ok(spectral(shift + hi, &*keep))
        }
        _ => Ok(c),
    }
}

/// Assembles normal equations over `n_traj` trajectories in parallel.
///
/// `fill(m, ne)` adds the rows of trajectory `m`.
pub fn assemble<F>(n_traj: usize, p: usize, k: usize, shared: bool, fill: F) -> NormalEquations
where
    F: Fn(usize, &mut NormalEquations) + Sync,
{
    let n_chunks = n_traj.div_ceil(CHUNK);
    let parts: Vec<NormalEquations> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut ne = NormalEquations::new(p, k, shared);
            for m in c * CHUNK..((c + 1) * CHUNK).min(n_traj) {
                fill(m, &mut ne);
            }
            ne
        })
        .collect();
    pairwise_sum(parts).unwrap_or_else(|| NormalEquations::new(p, k, shared))
}

fn pairwise_sum(mut parts: Vec<NormalEquations>) -> Option<NormalEquations> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}
