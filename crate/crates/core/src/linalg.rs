//! Dense row-major matrices, vector helpers and singular-value estimation.
//!
//! Only the top one or two singular values are ever needed, so everything here
//! is built on deterministic power iteration over the Gram operator of the
//! smaller side of the matrix.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_POWER_ITERS: usize = 10_000;
const RAYLEIGH_RTOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix shape {rows}x{cols} has a zero side")));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("matrix entry {i} is not finite")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix sides must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// `u vᵀ`
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                m.data[i * v.len() + j] = ui * vj;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `A x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Aᵀ y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), &mut out);
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, rhs.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to stack"))?;
        if parts.iter().any(|p| p.cols != first.cols) {
            return Err(Error::invalid("vstack needs equal column counts"));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Matrix {
            rows,
            cols: first.cols,
            data,
        })
    }

    pub fn fro_norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn fro_norm(&self) -> f64 {
        self.fro_norm_sq().sqrt()
    }

    /// Frobenius inner product `tr(Aᵀ B)`.
    pub fn inner(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(c);
        m
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, c: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(c, &other.data, &mut self.data);
    }

    /// `self += c * u vᵀ` without materialising the outer product.
    pub fn add_outer(&mut self, c: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = c * ui;
            if s != 0.0 {
                axpy(s, v, &mut self.data[i * self.cols..(i + 1) * self.cols]);
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn check_finite(a: &Matrix) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("matrix has non-finite entries"))
    }
}

/// Gram operator of the smaller side: `AᵀA` when `cols <= rows`, else `AAᵀ`.
struct Gram<'a> {
    a: &'a Matrix,
    right: bool,
}

impl<'a> Gram<'a> {
    fn new(a: &'a Matrix) -> Self {
        Self {
            a,
            right: a.cols <= a.rows,
        }
    }

    fn dim(&self) -> usize {
        if self.right {
            self.a.cols
        } else {
            self.a.rows
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        if self.right {
            self.a.matvec_t(&self.a.matvec(v))
        } else {
            self.a.matvec(&self.a.matvec_t(v))
        }
    }

    /// Index and value of the largest diagonal entry (a squared column or row norm).
    fn max_diag(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..self.dim() {
            let d = if self.right {
                (0..self.a.rows).map(|r| self.a[(r, i)].powi(2)).sum()
            } else {
                self.a.fro_row_sq(i)
            };
            if d > best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn power_iterate(&self, start: Vec<f64>) -> (f64, Vec<f64>) {
        let mut v = start;
        normalize(&mut v);
        let mut lambda_prev = f64::NAN;
        for _ in 0..MAX_POWER_ITERS {
            let w = self.apply(&v);
            let lambda = dot(&v, &w);
            let n = norm(&w);
            if n == 0.0 {
                return (0.0, v);
            }
            v = w;
            v.iter_mut().for_each(|x| *x /= n);
            if (lambda - lambda_prev).abs() <= RAYLEIGH_RTOL * lambda.abs() {
                return (lambda.max(0.0), v);
            }
            lambda_prev = lambda;
        }
        (dot(&v, &self.apply(&v)).max(0.0), v)
    }

    /// Largest eigenvalue and eigenvector. Starts from the normalized all-ones
    /// vector; if that start is (near) orthogonal to the dominant direction the
    /// Rayleigh quotient ends below the largest diagonal entry, and the run is
    /// repeated from the corresponding basis vector.
    fn dominant(&self) -> (f64, Vec<f64>) {
        let n = self.dim();
        let (lambda, v) = self.power_iterate(vec![1.0; n]);
        let (j, dmax) = self.max_diag();
        if lambda >= dmax * (1.0 - 1e-12) {
            return (lambda, v);
        }
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let (lambda2, v2) = self.power_iterate(e);
        if lambda2 > lambda {
            (lambda2, v2)
        } else {
            (lambda, v)
        }
    }
}

impl Matrix {
    fn fro_row_sq(&self, i: usize) -> f64 {
        let r = self.row(i);
        dot(r, r)
    }
}

/// Top singular value and the matching right singular vector.
fn top_right_singular(a: &Matrix) -> (f64, Vec<f64>) {
    let gram = Gram::new(a);
    let (lambda, v) = gram.dominant();
    let sigma = lambda.sqrt();
    if gram.right || sigma == 0.0 {
        let v = if gram.right { v } else { vec![0.0; a.cols] };
        return (sigma, v);
    }
    // v is a left singular vector; map it to the right side.
    let mut right = a.matvec_t(&v);
    normalize(&mut right);
    (sigma, right)
}

/// Largest singular value `σ₁(A)`.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    check_finite(a)?;
    Ok(Gram::new(a).dominant().0.sqrt())
}

/// `(σ₁, σ₂)` with σ₂ obtained by deflating the top singular triplet,
/// i.e. σ₂ = σ₁(A (I − v vᵀ)).
pub fn top2_singular_values(a: &Matrix) -> Result<(f64, f64)> {
    check_finite(a)?;
    let (s1, v) = top_right_singular(a);
    if a.rows.min(a.cols) == 1 || s1 == 0.0 {
        return Ok((s1, 0.0));
    }
    let av = a.matvec(&v);
    let mut deflated = a.clone();
    deflated.add_outer(-1.0, &av, &v);
    let s2 = Gram::new(&deflated).dominant().0.sqrt();
    Ok((s1, s2.min(s1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableRank {
    pub fro: f64,
    pub spec: f64,
    /// `fro / spec` (a ratio of norms, not of squared norms).
    pub srank: f64,
}

pub fn stable_rank(a: &Matrix) -> Result<StableRank> {
    check_finite(a)?;
    let fro = a.fro_norm();
    if fro == 0.0 {
        return Err(Error::Degenerate("stable rank of the zero matrix".into()));
    }
    let spec = spectral_norm(a)?;
    Ok(StableRank {
        fro,
        spec,
        srank: fro / spec,
    })
}
