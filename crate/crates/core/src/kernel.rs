//! Dense row-major matrices and the numeric primitives the rest of the crate
//! is built from: seeded randomness, row-wise softmax and normalization,
//! cosine similarity (with its backward pass), orthogonal initialization,
//! the Adam update and a central-difference gradient estimator.
//!
//! Samples and prototypes are stored as rows throughout, so a latent batch is
//! `B x d` and a prototype bank is `L x d`.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Matrix::new", "rows, cols >= 1", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// # Panics
    /// Panics if either dimension is zero.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, shape_str(self), shape_str(other)));
        }
        Ok(())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", format!("{}xN", self.cols), shape_str(other)));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t", format!("Nx{}", self.cols), shape_str(other)));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape("t_matmul", format!("{}xN", self.rows), shape_str(other)));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                for (oj, &bkj) in out.row_mut(i).iter_mut().zip(b) {
                    *oj += aki * bkj;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row_broadcast", format!("1x{}", self.cols), shape_str(bias)));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for row in self.iter_rows() {
            for (o, v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.iter_rows().map(|r| r.iter().sum()).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, "zip_map")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::shape("select_rows", format!("index < {}", self.rows), i));
            }
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(indices.len(), self.cols, data)
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &Matrix) -> Result<Matrix> {
        if self.cols != below.cols {
            return Err(Error::shape("vstack", format!("Nx{}", self.cols), shape_str(below)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&below.data);
        Matrix::new(self.rows + below.rows, self.cols, data)
    }

    /// Row-wise argmax; ties resolve to the lowest column index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows, m.cols)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Seeded random stream. ChaCha8 keeps draws identical across platforms.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream identified by `seed` and a path of labels.
    pub fn derived(seed: u64, path: &[u64]) -> Self {
        Self::new(derive_seed(seed, path))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, sd: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| sd * self.normal()).collect();
        Matrix { rows, cols, data }
    }
}

/// Mixes a base seed with a path of stream labels (splitmix64 finalizer).
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits:
/// `dz_k = r_k (dr_k - <r, dr>)`.
pub fn softmax_rows_backward(probs: &Matrix, d_probs: &Matrix) -> Result<Matrix> {
    probs.same_shape(d_probs, "softmax_rows_backward")?;
    let mut out = Matrix::zeros(probs.rows, probs.cols);
    for i in 0..probs.rows {
        let r = probs.row(i);
        let dr = d_probs.row(i);
        let inner = dot(r, dr);
        for (o, (&rk, &drk)) in out.row_mut(i).iter_mut().zip(r.iter().zip(dr)) {
            *o = rk * (drk - inner);
        }
    }
    Ok(out)
}

pub fn row_norms(m: &Matrix) -> Vec<f64> {
    m.iter_rows().map(|r| dot(r, r).sqrt()).collect()
}

/// Rows scaled to unit L2 norm. Rows with norm below [`NORM_FLOOR`] come back
/// as zeros and their indices are returned (and logged) as degenerate.
pub fn l2_normalize_rows(m: &Matrix) -> (Matrix, Vec<usize>) {
    let mut out = m.clone();
    let mut degenerate = Vec::new();
    for (r, norm) in row_norms(m).into_iter().enumerate() {
        let row = out.row_mut(r);
        if norm < NORM_FLOOR {
            row.fill(0.0);
            degenerate.push(r);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    if !degenerate.is_empty() {
        log::warn!("{} row(s) with near-zero norm left as zeros", degenerate.len());
    }
    (out, degenerate)
}

/// Pairwise cosine similarity between the rows of `a` (`NA x d`) and `b`
/// (`NB x d`). Zero rows have similarity 0 with everything.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("cosine_similarity", format!("Nx{}", a.cols), shape_str(b)));
    }
    let (an, _) = l2_normalize_rows(a);
    let (bn, _) = l2_normalize_rows(b);
    let mut s = an.matmul_t(&bn)?;
    for v in s.as_mut_slice() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(s)
}

/// Gradients of a scalar loss w.r.t. `a` and `b`, given its gradient w.r.t.
/// `cosine_similarity(a, b)`.
///
/// For `s_ij = <a_i, b_j> / (|a_i| |b_j|)`:
/// `ds_ij/da_i = (b^_j - s_ij a^_i) / |a_i|` and symmetrically for `b_j`.
pub fn cosine_similarity_backward(
    a: &Matrix,
    b: &Matrix,
    d_sim: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if a.cols != b.cols || d_sim.shape() != (a.rows, b.rows) {
        return Err(Error::shape(
            "cosine_similarity_backward",
            format!("{}x{}", a.rows, b.rows),
            shape_str(d_sim),
        ));
    }
    let a_norm = row_norms(a);
    let b_norm = row_norms(b);
    let (ah, _) = l2_normalize_rows(a);
    let (bh, _) = l2_normalize_rows(b);
    let sim = ah.matmul_t(&bh)?;

    let mut da = Matrix::zeros(a.rows, a.cols);
    let mut db = Matrix::zeros(b.rows, b.cols);
    for i in 0..a.rows {
        if a_norm[i] < NORM_FLOOR {
            continue;
        }
        for j in 0..b.rows {
            if b_norm[j] < NORM_FLOOR {
                continue;
            }
            let g = d_sim[(i, j)];
            if g == 0.0 {
                continue;
            }
            let s = sim[(i, j)];
            let (ai, bj) = (ah.row(i), bh.row(j));
            for k in 0..a.cols {
                da[(i, k)] += g * (bj[k] - s * ai[k]) / a_norm[i];
                db[(j, k)] += g * (ai[k] - s * bj[k]) / b_norm[j];
            }
        }
    }
    Ok((da, db))
}

/// A `rows x cols` matrix whose rows are orthonormal, built by Gram-Schmidt
/// on a seeded Gaussian draw. When `rows > cols` the rows are orthonormal in
/// consecutive blocks of `cols`.
pub fn orthogonal_init(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = rng.gaussian_matrix(rows, cols, 1.0);
    for block_start in (0..rows).step_by(cols) {
        let block_end = (block_start + cols).min(rows);
        for r in block_start..block_end {
            loop {
                for prev in block_start..r {
                    let proj = dot(m.row(r), m.row(prev));
                    let prev_row = m.row(prev).to_vec();
                    for (v, p) in m.row_mut(r).iter_mut().zip(&prev_row) {
                        *v -= proj * p;
                    }
                }
                let norm = dot(m.row(r), m.row(r)).sqrt();
                if norm > 1e-6 {
                    m.row_mut(r).iter_mut().for_each(|v| *v /= norm);
                    break;
                }
                // Numerically dependent draw: resample this row.
                for v in m.row_mut(r) {
                    *v = rng.normal();
                }
            }
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn for_param(param: &Matrix) -> Self {
        Self::new(param.rows, param.cols, AdamConfig::default())
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState, lr: f64) -> Result<()> {
    param.same_shape(grad, "adam_step")?;
    param.same_shape(&state.first_moment, "adam_step")?;
    if !(lr > 0.0) {
        return Err(Error::config("lr", format!("must be positive, got {lr}")));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let m = state.first_moment.as_mut_slice();
    let v = state.second_moment.as_mut_slice();
    for (k, (p, &g)) in param.data.iter_mut().zip(&grad.data).enumerate() {
        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Central-difference estimate of the gradient of `f` at `at`.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
    let mut grad = Matrix::zeros(at.rows, at.cols);
    let mut probe = at.clone();
    for k in 0..at.data.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let plus = f(&probe);
        probe.data[k] = orig - h;
        let minus = f(&probe);
        probe.data[k] = orig;
        grad.data[k] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `|a - b| / (|a| + |b|)` in Frobenius norm; the absolute difference when
/// both tensors are (numerically) zero.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius_norm() + numeric.frobenius_norm();
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
