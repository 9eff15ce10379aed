//! Dense f64 kernels: row-major matrices, elementwise nonlinearities,
//! softmax, and the clipped SGD update.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Everything that owns several
//! matrices (model parameters, gradient buffers) exposes them through
//! [`TensorSet`] so norms, updates, checkpoints and finite differences can be
//! written once.

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};

/// Seedable PRNG used for initialization, shuffling and sampling (PCG-64).
pub type Rng = Pcg64;

pub fn seeded_rng(seed: u64) -> Rng {
    Pcg64::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers (epoch, example id, ...) into an
/// independent stream seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Mat::from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Uniform(-scale, scale) entries.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        Mat { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `out += scale * self[:, col]`
    pub fn add_col_to(&self, col: usize, scale: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += scale * self.data[r * self.cols + col];
        }
    }

    /// `self[:, col] · v`
    pub fn col_dot(&self, col: usize, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.rows);
        v.iter()
            .enumerate()
            .map(|(r, x)| x * self.data[r * self.cols + col])
            .sum()
    }

    /// `self[:, col] += scale * v`
    pub fn add_to_col(&mut self, col: usize, scale: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (r, x) in v.iter().enumerate() {
            self.data[r * self.cols + col] += scale * x;
        }
    }

    /// `out += self · x` without shape checks beyond debug asserts.
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (row, o) in self.data.chunks_exact(self.cols).zip(out.iter_mut()) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &yr) in self.data.chunks_exact(self.cols).zip(y) {
            if yr != 0.0 {
                axpy(yr, row, out);
            }
        }
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.matvec_t_acc(y, &mut out);
        out
    }

    /// `self += y xᵀ`
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (row, &yr) in self.data.chunks_exact_mut(self.cols).zip(y) {
            if yr != 0.0 {
                axpy(yr, x, row);
            }
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `M x (+ b)`.
pub fn affine(m: &Mat, x: &[f64], b: Option<&[f64]>) -> Result<Vec<f64>> {
    if m.cols != x.len() {
        return Err(Error::shape(
            "affine",
            format!("matrix is {}x{}, vector has {}", m.rows, m.cols, x.len()),
        ));
    }
    let mut out = match b {
        Some(b) if b.len() != m.rows => {
            return Err(Error::shape(
                "affine",
                format!("bias has {}, matrix has {} rows", b.len(), m.rows),
            ))
        }
        Some(b) => b.to_vec(),
        None => vec![0.0; m.rows],
    };
    m.matvec_acc(x, &mut out);
    Ok(out)
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::shape("softmax", "empty input"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn tanh_(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries in descending order of value, ties by
/// lower index.
pub fn top_k(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// A collection of named parameter-shaped matrices.
pub trait TensorSet {
    fn tensors(&self) -> Vec<(&'static str, &Mat)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)>;

    fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.sum_sq()).sum::<f64>().sqrt()
    }

    fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }
}

impl TensorSet for Mat {
    fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        vec![("mat", self)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![("mat", self)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before rescaling.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when under the cap).
    pub scale: f64,
}

/// Rescales `grads` in place when their global L2 norm exceeds `max_norm`,
/// then applies `p -= lr * g`.
pub fn sgd_step<P, G>(params: &mut P, grads: &mut G, lr: f64, max_norm: f64) -> Result<StepReport>
where
    P: TensorSet + ?Sized,
    G: TensorSet + ?Sized,
{
    if !(lr > 0.0) || !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sgd_step needs lr > 0 and max_norm > 0 (got {lr}, {max_norm})"
        )));
    }
    let mut ps = params.tensors_mut();
    let mut gs = grads.tensors_mut();
    if ps.len() != gs.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} parameter tensors, {} gradient tensors", ps.len(), gs.len()),
        ));
    }
    for ((pn, p), (_, g)) in ps.iter().zip(gs.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{pn}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    for (name, g) in gs.iter() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let grad_norm = gs.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt();
    let scale = if grad_norm > max_norm {
        max_norm / grad_norm
    } else {
        1.0
    };
    for ((_, p), (_, g)) in ps.iter_mut().zip(gs.iter_mut()) {
        if scale != 1.0 {
            g.data.iter_mut().for_each(|x| *x *= scale);
        }
        axpy(-lr, &g.data, &mut p.data);
    }
    Ok(StepReport { grad_norm, scale })
}
