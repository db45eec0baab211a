//! Dense linear algebra, activations, seeded randomness and finite-difference
//! gradient checking.
//!
//! Everything runs in `f64`. Hot loops inside the encoder and classifier use
//! the unchecked `*_into` / `add_*` helpers after validating shapes once; the
//! public free functions validate on every call.

use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix data",
                format!("{} entries ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("matrix row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `out += self · x`. Shapes are the caller's responsibility.
    #[inline]
    pub(crate) fn add_mul_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · v`.
    #[inline]
    pub(crate) fn add_mul_transposed_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&vi, row) in v.iter().zip(self.data.chunks_exact(self.cols)) {
            if vi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += vi * w;
            }
        }
    }

    /// `self += a ⊗ b`.
    #[inline]
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ai, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ai == 0.0 {
                continue;
            }
            for (g, &bj) in row.iter_mut().zip(b) {
                *g += ai * bj;
            }
        }
    }

    pub(crate) fn check_shape(&self, what: &str, rows: usize, cols: usize) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(Error::shape(
                what,
                format!("{rows}x{cols}"),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }
}

/// Dense column vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, v: f64) -> Self {
        Vector(vec![v; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn concat(parts: &[&[f64]]) -> Self {
        let mut v = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            v.extend_from_slice(p);
        }
        Vector(v)
    }

    pub(crate) fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if self.len() != len {
            return Err(Error::shape(what, len, self.len()));
        }
        Ok(())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function, evaluated on whichever branch cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vector> {
    if scores.is_empty() {
        return Err(Error::EmptySoftmax);
    }
    Ok(softmax_unchecked(scores))
}

pub(crate) fn softmax_unchecked(scores: &[f64]) -> Vector {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Vector(out)
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vector> {
    if m.cols() != v.len() {
        return Err(Error::shape(
            "matvec",
            format!("vector of length {} for a {}x{} matrix", m.cols(), m.rows(), m.cols()),
            format!("length {}", v.len()),
        ));
    }
    let mut out = Vector::zeros(m.rows());
    m.add_mul_into(v, &mut out);
    Ok(out)
}

/// Seeded random source. Identical seeds give identical draw sequences on
/// every platform (ChaCha8 stream).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Independent child stream, so that consumers of the child do not
    /// shift the parent's sequence by a data-dependent amount.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }
}

/// Matrix with entries i.i.d. uniform in `[-scale, scale]`.
pub fn init_uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "init scale must be positive, got {scale}"
        )));
    }
    let data = (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect();
    Ok(Matrix { rows, cols, data })
}

pub(crate) fn fill_uniform(data: &mut [f64], scale: f64, rng: &mut Rng) {
    data.iter_mut().for_each(|x| *x = rng.uniform(-scale, scale));
}

/// A collection of named, flat parameter tensors visited in a fixed order.
///
/// Optimizers, checkpoints and the gradient checker all walk parameters
/// through this trait, so two values of the same architecture always yield
/// the same names in the same order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

impl ParamSet for Vector {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![("value".to_string(), &self.0)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("value".to_string(), &mut self.0)]
    }
}

/// Checks that two parameter sets have the same tensor names and sizes.
pub fn check_same_layout<P: ParamSet + ?Sized, Q: ParamSet + ?Sized>(a: &P, b: &Q) -> Result<()> {
    let ta = a.tensors();
    let tb = b.tensors();
    if ta.len() != tb.len() {
        return Err(Error::shape("parameter set", format!("{} tensors", ta.len()), tb.len()));
    }
    for ((na, da), (nb, db)) in ta.iter().zip(&tb) {
        if na != nb || da.len() != db.len() {
            return Err(Error::shape(
                na.clone(),
                format!("{na} with {} entries", da.len()),
                format!("{nb} with {} entries", db.len()),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per tensor, in visiting order.
    pub per_tensor: Vec<(String, f64)>,
    pub max_relative_error: f64,
}

/// Compares an analytic gradient against central differences.
///
/// Per entry the error is `|a - n| / max(1e-8, |a| + |n|)`; the report holds
/// the max per tensor and overall.
pub fn grad_check<P, F>(f: F, params: &P, analytic: &P, epsilon: f64) -> Result<GradCheckReport>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    check_same_layout(params, analytic)?;

    let grads: Vec<(String, Vec<f64>)> = analytic.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();

    let mut probe = params.clone();
    let mut per_tensor = Vec::with_capacity(grads.len());
    let mut overall = 0.0f64;

    let set = |p: &mut P, t: usize, j: usize, v: f64| {
        p.tensors_mut()[t].1[j] = v;
    };

    for (t, (name, analytic)) in grads.iter().enumerate() {
        let mut worst = 0.0f64;
        for (j, &a) in analytic.iter().enumerate() {
            let original = probe.tensors()[t].1[j];

            set(&mut probe, t, j, original + epsilon);
            let plus = f(&probe)?;
            set(&mut probe, t, j, original - epsilon);
            let minus = f(&probe)?;
            set(&mut probe, t, j, original);

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("{name}[{j}]")));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
        overall = overall.max(worst);
        per_tensor.push((name.clone(), worst));
    }

    Ok(GradCheckReport {
        per_tensor,
        max_relative_error: overall,
    })
}
