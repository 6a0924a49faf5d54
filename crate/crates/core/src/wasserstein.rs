//! Wasserstein-2 distance between equal-size uniform empirical measures.
//!
//! Up to [`W2Options::m_exact`] points the optimal coupling is a permutation,
//! found with the shortest-augmenting-path Hungarian method in `O(M³)`.
//! Above that the distance is approximated by the debiased Sinkhorn
//! divergence
//!
//! ```text
//! S_ε(a, b) = OT_ε(a, b) − ½ OT_ε(a, a) − ½ OT_ε(b, b)
//! ```
//!
//! with `ε = 1e-3 · median(‖a_i − b_j‖²)`, reached by ε-scaling from the
//! largest cost, and `W₂ ≈ √max(S_ε, 0)`. Such results carry
//! `approximate = true`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_M_EXACT: usize = 2000;
pub const DEFAULT_EPS_FACTOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct W2Options {
    pub m_exact: usize,
    pub eps_factor: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for W2Options {
    fn default() -> Self {
        W2Options {
            m_exact: DEFAULT_M_EXACT,
            eps_factor: DEFAULT_EPS_FACTOR,
            max_iterations: 2000,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2 {
    pub distance: f64,
    pub approximate: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-major squared-distance matrix between point sets of dimension `dim`.
fn cost_matrix(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let n = a.len() / dim;
    let m = b.len() / dim;
    let mut c = vec![0.0; n * m];
    c.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let ai = &a[i * dim..(i + 1) * dim];
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = sq_dist(ai, &b[j * dim..(j + 1) * dim]);
        }
    });
    c
}

/// Minimum-cost perfect matching on a square `n × n` row-major cost matrix.
///
/// Returns `assignment[i] = j` for each row `i`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    // 1-based potentials and matching as in the classical formulation
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact `W₂` through the optimal permutation.
pub fn wasserstein2_exact(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let n = a.len() / dim;
    if n == 0 {
        return 0.0;
    }
    let cost = cost_matrix(a, b, dim);
    let perm = solve_assignment(&cost, n);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    (total / n as f64).max(0.0).sqrt()
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Dual value of entropic OT between uniform measures on `n` and `m` points.
fn entropic_ot(cost: &[f64], n: usize, m: usize, eps_target: f64, opts: &W2Options) -> f64 {
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let cmax = cost.iter().copied().fold(0.0f64, f64::max).max(eps_target);
    let mut eps = cmax;
    loop {
        eps = (eps * 0.5).max(eps_target);
        for _ in 0..opts.max_iterations {
            // f_i = -ε log Σ_j b_j exp((g_j − C_ij)/ε)
            f.par_iter_mut().enumerate().for_each(|(i, fi)| {
                let row = &cost[i * m..(i + 1) * m];
                *fi = -eps * log_sum_exp(row.iter().zip(&g).map(|(c, gj)| log_b + (gj - c) / eps));
            });
            let g_new: Vec<f64> = (0..m)
                .into_par_iter()
                .map(|j| -eps * log_sum_exp((0..n).map(|i| log_a + (f[i] - cost[i * m + j]) / eps)))
                .collect();
            let shift = g_new
                .iter()
                .zip(&g)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            g = g_new;
            if shift <= opts.tolerance * cmax {
                break;
            }
        }
        if eps <= eps_target {
            break;
        }
    }
    f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    let k = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    *m
}

/// Debiased Sinkhorn approximation of `W₂`.
pub fn wasserstein2_sinkhorn(a: &[f64], b: &[f64], dim: usize, opts: &W2Options) -> f64 {
    let n = a.len() / dim;
    if n == 0 {
        return 0.0;
    }
    let cab = cost_matrix(a, b, dim);
    let eps = (opts.eps_factor * median(cab.clone())).max(f64::MIN_POSITIVE);
    let ab = entropic_ot(&cab, n, n, eps, opts);
    let aa = entropic_ot(&cost_matrix(a, a, dim), n, n, eps, opts);
    let bb = entropic_ot(&cost_matrix(b, b, dim), n, n, eps, opts);
    (ab - 0.5 * aa - 0.5 * bb).max(0.0).sqrt()
}

/// `W₂` between the uniform empirical measures on the rows of `a` and `b`
/// (each flattened `M × dim`).
pub fn wasserstein2(a: &[f64], b: &[f64], dim: usize, opts: &W2Options) -> Result<W2> {
    if dim == 0 || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::Contract("sample arrays are not a whole number of points".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "unequal sample counts {} and {}",
            a.len() / dim,
            b.len() / dim
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wasserstein samples"));
    }
    let n = a.len() / dim;
    if n <= opts.m_exact {
        Ok(W2 {
            distance: wasserstein2_exact(a, b, dim),
            approximate: false,
        })
    } else {
        Ok(W2 {
            distance: wasserstein2_sinkhorn(a, b, dim, opts),
            approximate: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn permuted_copy_has_zero_distance() {
        let a = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [4.0, 5.0, 0.0, 1.0, 2.0, 3.0];
        let w = wasserstein2(&a, &b, 2, &W2Options::default()).unwrap();
        assert_eq!(w.distance, 0.0);
        assert!(!w.approximate);
    }

    #[test]
    fn unequal_counts_rejected() {
        assert!(wasserstein2(&[0.0, 1.0], &[0.0], 1, &W2Options::default()).is_err());
    }

    #[test]
    fn shift_gives_translation_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..40).map(|_| rng.random()).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        let w = wasserstein2_exact(&a, &b, 2);
        // translating every point by (0.5, 0.5)
        assert!((w - (0.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn assignment_on_known_matrix() {
        let c = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let perm = solve_assignment(&c, 3);
        let cost: f64 = perm.iter().enumerate().map(|(i, &j)| c[i * 3 + j]).sum();
        assert_eq!(cost, 5.0);
    }

    #[test]
    fn sinkhorn_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..120).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..120).map(|_| rng.random::<f64>() + 0.2).collect();
        let exact = wasserstein2_exact(&a, &b, 2);
        let opts = W2Options { m_exact: 10, ..W2Options::default() };
        let w = wasserstein2(&a, &b, 2, &opts).unwrap();
        assert!(w.approximate);
        assert!((w.distance - exact).abs() < 0.05 * exact, "{} vs {exact}", w.distance);
    }
}
