//! Finite hypothesis spaces: tensor products of one-dimensional bases.
//!
//! Three 1-D families are available:
//!
//! * `Bspline`: clamped (open) B-splines of degree `p` on the given knots,
//!   `segments + p` functions, a partition of unity on `[a, b]`.
//! * `PiecewisePoly`: discontinuous Legendre polynomials of degree `≤ p` on
//!   each segment, `segments · (p + 1)` functions.
//! * `Trig`: `{1, cos kωt, sin kωt}` for `k ≤ p` with `ω = 2π / (b − a)`,
//!   periodic with period `b − a`.
//!
//! Queries outside `[a, b]` are clamped to the boundary for the polynomial
//! families; the trig family wraps instead.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_P_MAX: usize = 2;
pub const DEFAULT_SEGMENTS: usize = 8;
pub const DEFAULT_PADDING: f64 = 0.05;
/// Minimum half-width of an inferred interval when the data are constant.
pub const MIN_PAD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Bspline,
    PiecewisePoly,
    Trig,
}

/// Nonzero entries of a basis evaluation.
#[derive(Debug, Clone, Default)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn clear(&mut self) {
        self.idx.clear();
        self.val.clear();
    }

    pub fn push(&mut self, i: usize, v: f64) {
        self.idx.push(i);
        self.val.push(v);
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx.iter().copied().zip(self.val.iter().copied())
    }
}

/// Anything that maps a point to a vector of basis values.
pub trait Basis: Send + Sync {
    fn dims_in(&self) -> usize;

    /// Number of basis functions.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the nonzero values at `point` into `row` (cleared first).
    fn eval_sparse(&self, point: &[f64], row: &mut SparseRow);

    fn eval_into(&self, point: &[f64], out: &mut [f64]) {
        let mut row = SparseRow::default();
        self.eval_sparse(point, &mut row);
        out.fill(0.0);
        for (i, v) in row.iter() {
            out[i] += v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec1D {
    pub family: BasisFamily,
    pub degree: usize,
    #[serde(default = "default_p_max")]
    pub p_max: usize,
    /// Strictly increasing breakpoints `a = k_0 < … < k_s = b`.
    pub knots: Vec<f64>,
    pub n_functions: usize,
}

fn default_p_max() -> usize {
    DEFAULT_P_MAX
}

fn uniform_knots(a: f64, b: f64, segments: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=segments)
        .map(|i| a + (b - a) * i as f64 / segments as f64)
        .collect();
    k[segments] = b;
    k
}

impl BasisSpec1D {
    pub fn new(family: BasisFamily, degree: usize, knots: Vec<f64>) -> Result<Self> {
        let segments = knots.len().saturating_sub(1);
        let n_functions = match family {
            BasisFamily::Bspline => segments + degree,
            BasisFamily::PiecewisePoly => segments * (degree + 1),
            BasisFamily::Trig => 2 * degree + 1,
        };
        let spec = BasisSpec1D {
            family,
            degree,
            p_max: DEFAULT_P_MAX,
            knots,
            n_functions,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(family: BasisFamily, a: f64, b: f64, segments: usize, degree: usize) -> Result<Self> {
        if segments == 0 {
            return Err(Error::config("basis.segments", "must be positive"));
        }
        if !(a < b) {
            return Err(Error::config("basis.box", format!("empty interval [{a}, {b}]")));
        }
        let knots = match family {
            BasisFamily::Trig => vec![a, b],
            _ => uniform_knots(a, b, segments),
        };
        Self::new(family, degree, knots)
    }

    pub fn bspline(a: f64, b: f64, segments: usize, degree: usize) -> Result<Self> {
        Self::uniform(BasisFamily::Bspline, a, b, segments, degree)
    }

    pub fn piecewise_poly(a: f64, b: f64, segments: usize, degree: usize) -> Result<Self> {
        Self::uniform(BasisFamily::PiecewisePoly, a, b, segments, degree)
    }

    /// Trigonometric basis of period `2π` on `[0, 2π)`.
    pub fn trig(degree: usize) -> Result<Self> {
        Self::uniform(BasisFamily::Trig, 0.0, TAU, 1, degree)
    }

    /// Raises the degree cap above [`DEFAULT_P_MAX`].
    pub fn with_p_max(mut self, p_max: usize) -> Result<Self> {
        self.p_max = p_max;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.len() < 2 {
            return Err(Error::config("basis.knots", "need at least two knots"));
        }
        if self.knots.iter().any(|k| !k.is_finite()) || self.knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("basis.knots", "knots must be finite and strictly increasing"));
        }
        if self.degree > self.p_max {
            return Err(Error::config(
                "basis.degree",
                format!("degree {} exceeds p_max {}", self.degree, self.p_max),
            ));
        }
        if self.family == BasisFamily::Trig && self.knots.len() != 2 {
            return Err(Error::config("basis.knots", "trig family takes a single period [a, b]"));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn segments(&self) -> usize {
        self.knots.len() - 1
    }

    /// Segment containing `t` (already clamped); the last segment is closed.
    fn segment(&self, t: f64) -> usize {
        let s = self.knots.partition_point(|&k| k <= t);
        s.saturating_sub(1).min(self.segments() - 1)
    }

    fn clamp(&self, t: f64) -> f64 {
        if t.is_nan() {
            return self.lower();
        }
        t.clamp(self.lower(), self.upper())
    }

    /// Clamped knot value with index `i` in the extended knot vector
    /// `[a × (p+1), k_1, …, k_{s−1}, b × (p+1)]`.
    fn ext_knot(&self, i: usize) -> f64 {
        let p = self.degree;
        if i <= p {
            self.lower()
        } else {
            self.knots[(i - p).min(self.segments())]
        }
    }

    pub fn eval_sparse(&self, t: f64, row: &mut SparseRow) {
        row.clear();
        match self.family {
            BasisFamily::Bspline => {
                let t = self.clamp(t);
                let s = self.segment(t);
                let p = self.degree;
                let span = s + p;
                let mut n = [0.0f64; 16];
                let mut left = [0.0f64; 16];
                let mut right = [0.0f64; 16];
                n[0] = 1.0;
                for j in 1..=p {
                    left[j] = t - self.ext_knot(span + 1 - j);
                    right[j] = self.ext_knot(span + j) - t;
                    let mut saved = 0.0;
                    for r in 0..j {
                        let temp = n[r] / (right[r + 1] + left[j - r]);
                        n[r] = saved + right[r + 1] * temp;
                        saved = left[j - r] * temp;
                    }
                    n[j] = saved;
                }
                for (r, v) in n.iter().take(p + 1).enumerate() {
                    row.push(s + r, *v);
                }
            }
            BasisFamily::PiecewisePoly => {
                let t = self.clamp(t);
                let s = self.segment(t);
                let (a, b) = (self.knots[s], self.knots[s + 1]);
                let tau = 2.0 * (t - a) / (b - a) - 1.0;
                let base = s * (self.degree + 1);
                // Legendre recurrence
                let (mut p0, mut p1) = (1.0, tau);
                row.push(base, 1.0);
                if self.degree >= 1 {
                    row.push(base + 1, tau);
                }
                for q in 2..=self.degree {
                    let qf = q as f64;
                    let p2 = ((2.0 * qf - 1.0) * tau * p1 - (qf - 1.0) * p0) / qf;
                    row.push(base + q, p2);
                    p0 = p1;
                    p1 = p2;
                }
            }
            BasisFamily::Trig => {
                let omega = TAU / (self.upper() - self.lower());
                let phase = omega * (t - self.lower());
                row.push(0, 1.0);
                for k in 1..=self.degree {
                    let (s, c) = (k as f64 * phase).sin_cos();
                    row.push(2 * k - 1, c);
                    row.push(2 * k, s);
                }
            }
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut row = SparseRow::default();
        self.eval_sparse(t, &mut row);
        let mut out = vec![0.0; self.n_functions];
        for (i, v) in row.iter() {
            out[i] += v;
        }
        out
    }
}

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundingBox {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (a, b))| a <= v && v <= b)
    }
}

/// Per-dimension `[min − pad, max + pad]` with `pad = padding_fraction · (max − min)`.
pub fn infer_box<'a, I>(points: I, padding_fraction: f64) -> Result<BoundingBox>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    if !(padding_fraction >= 0.0) {
        return Err(Error::config("basis.padding_fraction", "must be non-negative"));
    }
    let mut it = points.into_iter();
    let first = it.next().ok_or_else(|| Error::Contract("cannot infer a box from no data".into()))?;
    let mut lower = first.to_vec();
    let mut upper = first.to_vec();
    for p in std::iter::once(first).chain(it) {
        if p.len() != lower.len() {
            return Err(Error::DimensionMismatch {
                block: "feature",
                expected: lower.len(),
                got: p.len(),
            });
        }
        for (i, &v) in p.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite("basis box data"));
            }
            lower[i] = lower[i].min(v);
            upper[i] = upper[i].max(v);
        }
    }
    for (a, b) in lower.iter_mut().zip(upper.iter_mut()) {
        let range = *b - *a;
        let pad = if range > 0.0 {
            padding_fraction * range
        } else {
            MIN_PAD
        };
        *a -= pad;
        *b += pad;
    }
    Ok(BoundingBox { lower, upper })
}

/// Tensor-product library over a box; the last input dimension varies fastest
/// in the flattened function index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisLibrary {
    pub specs: Vec<BasisSpec1D>,
}

impl BasisLibrary {
    pub fn new(specs: Vec<BasisSpec1D>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("basis", "library needs at least one dimension"));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(BasisLibrary { specs })
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox {
            lower: self.specs.iter().map(|s| s.lower()).collect(),
            upper: self.specs.iter().map(|s| s.upper()).collect(),
        }
    }

    pub fn n_total(&self) -> usize {
        self.specs.iter().map(|s| s.n_functions).product()
    }

    pub fn eval(&self, point: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_total()];
        self.eval_into(point, &mut out);
        out
    }
}

impl Basis for BasisLibrary {
    fn dims_in(&self) -> usize {
        self.specs.len()
    }

    fn len(&self) -> usize {
        self.n_total()
    }

    fn eval_sparse(&self, point: &[f64], row: &mut SparseRow) {
        debug_assert_eq!(point.len(), self.specs.len());
        row.clear();
        row.push(0, 1.0);
        let mut dim_row = SparseRow::default();
        let mut next = SparseRow::default();
        for (spec, &t) in self.specs.iter().zip(point) {
            spec.eval_sparse(t, &mut dim_row);
            next.clear();
            for (i, v) in row.iter() {
                for (j, w) in dim_row.iter() {
                    next.push(i * spec.n_functions + j, v * w);
                }
            }
            std::mem::swap(row, &mut next);
        }
    }
}

/// Row `i` is the basis evaluated at `points[i]`.
pub fn design_matrix<'a, B, I>(basis: &B, points: I) -> DMatrix<f64>
where
    B: Basis + ?Sized,
    I: IntoIterator<Item = &'a [f64]>,
{
    let rows: Vec<Vec<f64>> = points
        .into_iter()
        .map(|p| {
            let mut out = vec![0.0; basis.len()];
            basis.eval_into(p, &mut out);
            out
        })
        .collect();
    DMatrix::from_fn(rows.len(), basis.len(), |i, j| rows[i][j])
}

/// One input dimension of a library in config form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimBasisConfig {
    pub family: BasisFamily,
    pub degree: usize,
    #[serde(default = "default_segments")]
    pub segments: usize,
}

fn default_segments() -> usize {
    DEFAULT_SEGMENTS
}

fn default_padding() -> f64 {
    DEFAULT_PADDING
}

/// A library whose box is inferred from data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub dims: Vec<DimBasisConfig>,
    #[serde(default = "default_padding")]
    pub padding_fraction: f64,
}

impl BasisConfig {
    /// Same family, degree and segment count in every dimension.
    pub fn uniform(family: BasisFamily, degree: usize, segments: usize, dims: usize) -> Self {
        BasisConfig {
            dims: vec![DimBasisConfig { family, degree, segments }; dims],
            padding_fraction: DEFAULT_PADDING,
        }
    }

    /// Builds the library on `bbox`; trig dimensions ignore the box and use `[0, 2π)`.
    pub fn build(&self, bbox: &BoundingBox) -> Result<BasisLibrary> {
        if bbox.dim() != self.dims.len() {
            return Err(Error::DimensionMismatch {
                block: "basis dims",
                expected: self.dims.len(),
                got: bbox.dim(),
            });
        }
        let specs = self
            .dims
            .iter()
            .enumerate()
            .map(|(i, d)| match d.family {
                BasisFamily::Trig => BasisSpec1D::trig(d.degree),
                family => BasisSpec1D::uniform(family, bbox.lower[i], bbox.upper[i], d.segments, d.degree),
            })
            .collect::<Result<Vec<_>>>()?;
        BasisLibrary::new(specs)
    }

    pub fn build_from_data<'a, I>(&self, points: I) -> Result<BasisLibrary>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let bbox = infer_box(points, self.padding_fraction)?;
        self.build(&bbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook Cox–de Boor recursion on an explicit knot vector.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, t: f64) -> f64 {
        if p == 0 {
            let last = knots[knots.len() - 1];
            let inside = knots[i] <= t && t < knots[i + 1];
            let at_end = t == last && knots[i + 1] == last && knots[i] < last;
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, t);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - t) / d2 * cox_de_boor(knots, i + 1, p - 1, t);
        }
        v
    }

    #[test]
    fn infer_box_pads_and_floors() {
        let data: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0]];
        let b = infer_box(data.iter().map(|v| v.as_slice()), 0.05).unwrap();
        assert!((b.lower[0] + 0.05).abs() < 1e-15 && (b.upper[0] - 1.05).abs() < 1e-15);
        let data: Vec<Vec<f64>> = vec![vec![3.0]; 4];
        let b = infer_box(data.iter().map(|v| v.as_slice()), 0.05).unwrap();
        assert_eq!(b.lower[0], 3.0 - 1e-8);
        assert_eq!(b.upper[0], 3.0 + 1e-8);
        let bad: Vec<Vec<f64>> = vec![vec![f64::NAN]];
        assert!(infer_box(bad.iter().map(|v| v.as_slice()), 0.05).is_err());
        assert!(infer_box(std::iter::empty(), 0.05).is_err());
    }

    #[test]
    fn hat_functions_partition_unity() {
        let s = BasisSpec1D::bspline(-1.0, 2.0, 5, 1).unwrap();
        assert_eq!(s.n_functions, 6);
        for i in 0..=300 {
            let t = -1.0 + 3.0 * i as f64 / 300.0;
            let sum: f64 = s.eval(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn quadratic_bspline_matches_cox_de_boor() {
        let s = BasisSpec1D::bspline(0.0, 1.0, 4, 2).unwrap();
        let ext = [0.0, 0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0];
        for t in [0.125, 0.375, 0.625, 0.875, 0.0, 0.3, 1.0] {
            let v = s.eval(t);
            for (i, vi) in v.iter().enumerate() {
                let expect = cox_de_boor(&ext, i, 2, t);
                assert!((vi - expect).abs() < 1e-14, "t={t} i={i}: {vi} vs {expect}");
            }
        }
    }

    #[test]
    fn trig_constant_term() {
        let s = BasisSpec1D::trig(2).unwrap();
        assert_eq!(s.n_functions, 5);
        for t in [0.0, 1.0, 3.0, 10.0, -4.0] {
            let v = s.eval(t);
            assert_eq!(v[0], 1.0);
            let w = s.eval(t + TAU);
            for (a, b) in v.iter().zip(&w) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn piecewise_poly_is_local() {
        let s = BasisSpec1D::piecewise_poly(0.0, 2.0, 2, 2).unwrap();
        assert_eq!(s.n_functions, 6);
        let v = s.eval(0.5);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
        assert_eq!(v[0], 1.0);
        assert!((v[1] - 0.0).abs() < 1e-15);
        assert!((v[2] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn out_of_box_points_clamp() {
        let s = BasisSpec1D::bspline(0.0, 1.0, 3, 2).unwrap();
        assert_eq!(s.eval(-5.0), s.eval(0.0));
        assert_eq!(s.eval(7.0), s.eval(1.0));
    }

    #[test]
    fn degree_above_cap_is_rejected() {
        assert!(BasisSpec1D::bspline(0.0, 1.0, 3, 3).is_err());
        let s = BasisSpec1D::new(BasisFamily::Bspline, 2, vec![0.0, 1.0]).unwrap();
        assert!(s.clone().with_p_max(1).is_err());
        assert!(BasisSpec1D::new(BasisFamily::Bspline, 1, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn tensor_library_products() {
        let lib = BasisLibrary::new(vec![
            BasisSpec1D::bspline(0.0, 1.0, 2, 1).unwrap(),
            BasisSpec1D::trig(1).unwrap(),
        ])
        .unwrap();
        assert_eq!(lib.n_total(), 9);
        let p = [0.3, 1.2];
        let v = lib.eval(&p);
        let a = lib.specs[0].eval(0.3);
        let b = lib.specs[1].eval(1.2);
        for i in 0..3 {
            for j in 0..3 {
                assert!((v[i * 3 + j] - a[i] * b[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn design_matrix_rows() {
        let lib = BasisLibrary::new(vec![BasisSpec1D::bspline(0.0, 1.0, 3, 1).unwrap()]).unwrap();
        let pts: Vec<Vec<f64>> = vec![vec![0.4]];
        let a = design_matrix(&lib, pts.iter().map(|v| v.as_slice()));
        assert_eq!(a.shape(), (1, 4));
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), lib.eval(&[0.4]));
        let pts: Vec<Vec<f64>> = vec![vec![0.7]; 3];
        let a = design_matrix(&lib, pts.iter().map(|v| v.as_slice()));
        assert_eq!(a.row(0), a.row(1));
        assert_eq!(a.row(1), a.row(2));
    }
}
