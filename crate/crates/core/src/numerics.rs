//! Dense matrices, normalized rows, KL divergence, top-k selection and a
//! central-difference gradient oracle.
//!
//! All arithmetic is `f64`. Nothing here allocates a computation graph;
//! modules that need gradients derive them analytically and check them
//! against [`finite_diff_grad`].

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use crate::error::{LabError, Result};
use crate::rng::Stream;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LabError::NonFinite(format!(
                "matrix entry ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Entries drawn i.i.d. from `N(0, scale²)`.
    pub fn random_normal(rows: usize, cols: usize, scale: f64, rng: &mut Stream) -> Self {
        Self::from_fn(rows, cols, |_, _| scale * rng.normal())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y` for a vector `y` of length `rows`.
    pub fn transpose_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        out
    }

    /// Adds `scale · a bᵀ` in place.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            let s = scale * ai;
            if s == 0.0 {
                continue;
            }
            for (m, &bj) in self.row_mut(i).iter_mut().zip(b) {
                *m += s * bj;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Norm-wise relative deviation `‖a − b‖∞ / ‖b‖∞`, falling back to the
/// absolute deviation when `b` is identically zero.
pub fn max_rel_deviation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0_f64, |m, y| m.max(y.abs()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn max_abs_deviation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// A probability vector: nonnegative entries summing to one within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityRow(Vec<f64>);

pub const PROB_SUM_TOL: f64 = 1e-9;

impl ProbabilityRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LabError::Empty("probability row".into()));
        }
        if let Some(i) = values.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(LabError::Degenerate(format!(
                "entry {i} = {} is not a probability",
                values[i]
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(LabError::Degenerate(format!("row sums to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for ProbabilityRow {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Max-subtracted softmax of one row. Entries with `mask[j] == false` are 0.
pub fn softmax_masked(x: &[f64], mask: Option<&[bool]>) -> Option<Vec<f64>> {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let max = x
        .iter()
        .enumerate()
        .filter(|&(j, _)| allowed(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(j, &v)| if allowed(j) { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Some(out)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    softmax_masked(x, None).expect("softmax of an empty row")
}

/// Log-softmax restricted to the allowed entries; masked entries are `-inf`.
pub fn log_softmax_masked(x: &[f64], mask: Option<&[bool]>) -> Option<Vec<f64>> {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let max = x
        .iter()
        .enumerate()
        .filter(|&(j, _)| allowed(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let lse = max
        + x.iter()
            .enumerate()
            .filter(|&(j, _)| allowed(j))
            .map(|(_, &v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    Some(
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                if allowed(j) {
                    v - lse
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect(),
    )
}

/// Row-wise softmax with an optional boolean grid (`true` = keep).
pub fn softmax_rows(m: &Matrix, mask: Option<&[Vec<bool>]>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.len() != m.rows() || mask.iter().any(|r| r.len() != m.cols()) {
            return Err(LabError::Shape("mask grid does not match matrix".into()));
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row_mask = mask.map(|g| g[i].as_slice());
        let sm = softmax_masked(m.row(i), row_mask).ok_or(LabError::FullyMaskedRow { row: i })?;
        out.row_mut(i).copy_from_slice(&sm);
    }
    Ok(out)
}

pub fn l1_normalize(v: &[f64]) -> Result<ProbabilityRow> {
    if v.is_empty() {
        return Err(LabError::Empty("l1_normalize input".into()));
    }
    if let Some(i) = v.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(LabError::Invalid(format!(
            "entry {i} = {} is negative or non-finite",
            v[i]
        )));
    }
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return Err(LabError::Degenerate("all-zero target distribution".into()));
    }
    Ok(ProbabilityRow(v.iter().map(|x| x / sum).collect()))
}

/// `Σ p_i ln(p_i / q_i)` with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LabError::Shape(format!(
            "KL over lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(LabError::SupportViolation { index: i });
            }
            acc += pi * (pi / qi).ln();
        }
    }
    // Rounding can leave a tiny negative residue when p == q.
    Ok(acc.max(0.0))
}

/// Gradient of `KL(p ‖ softmax(x))` with respect to `x`, for a normalized `p`.
pub fn kl_softmax_grad(p: &[f64], x: &[f64]) -> Vec<f64> {
    softmax(x).iter().zip(p).map(|(q, p)| q - p).collect()
}

/// How `topk_indices` orders equal scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieRule {
    /// Equal scores rank the smaller index first.
    #[default]
    SmallerIndex,
    /// Negative control for the verification harness: flips the tie order on
    /// every call, so repeated evaluations disagree whenever ties exist.
    Corrupted,
}

static CORRUPT_FLIP: AtomicU64 = AtomicU64::new(0);

/// Indices of the `min(k, len)` largest scores, sorted ascending.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    topk_indices_with(scores, k, TieRule::SmallerIndex)
}

pub fn topk_indices_with(scores: &[f64], k: usize, rule: TieRule) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(LabError::Empty("top-k scores".into()));
    }
    if k == 0 {
        return Err(LabError::Invalid("top-k needs k >= 1".into()));
    }
    if k >= scores.len() {
        return Ok((0..scores.len()).collect());
    }
    let larger_index_first = match rule {
        TieRule::SmallerIndex => false,
        TieRule::Corrupted => CORRUPT_FLIP.fetch_add(1, AtomicOrdering::Relaxed) % 2 == 1,
    };
    let rank = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then_with(|| {
            if larger_index_first {
                b.cmp(a)
            } else {
                a.cmp(b)
            }
        })
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.select_nth_unstable_by(k - 1, rank);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Central differences `(f(x + eps e_i) − f(x − eps e_i)) / 2 eps`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(LabError::Invalid(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(LabError::NonFinite(format!(
                "objective near coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}
