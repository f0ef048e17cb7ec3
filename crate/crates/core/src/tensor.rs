//! Dense linear algebra, classification losses and first-order optimizers.
//!
//! Everything here works in `f64`. Training loops elsewhere in the crate hold
//! their parameters as lists of [`Matrix`] values and hand them to
//! [`Optimizer::step`] together with gradients of the same layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
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

    /// Builds a matrix whose rows are the given vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::domain("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Column vector.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`.
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

    /// `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = alpha * ui;
            if s != 0.0 {
                let cols = self.cols;
                axpy(s, v, &mut self.data[i * cols..(i + 1) * cols]);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(s, &other.data, &mut self.data);
    }

    pub fn frobenius_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest singular value.
    ///
    /// Computed from the eigenvalues of the smaller Gram matrix by cyclic
    /// Jacobi rotation, which is exact to rounding for the small head
    /// matrices used here.
    pub fn spectral_norm(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let gram = if self.rows <= self.cols {
            Matrix::from_fn(self.rows, self.rows, |i, j| dot(self.row(i), self.row(j)))
        } else {
            let t = self.transpose();
            Matrix::from_fn(t.rows, t.rows, |i, j| dot(t.row(i), t.row(j)))
        };
        let lambda = symmetric_eigenvalues(gram)
            .into_iter()
            .fold(0.0_f64, f64::max);
        lambda.sqrt()
    }
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
pub fn symmetric_eigenvalues(mut a: Matrix) -> Vec<f64> {
    let n = a.rows;
    assert_eq!(n, a.cols, "matrix must be square");
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j) * a.get(i, j))
            .sum();
        let diag: f64 = (0..n).map(|i| a.get(i, i) * a.get(i, i)).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &mut [f64]) -> f64 {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|v| *v /= n);
    }
    n
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// with respect to the logits (`softmax − one_hot`).
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::domain("cross-entropy needs at least two classes"));
    }
    if label >= logits.len() {
        return Err(Error::domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let log_p = log_softmax(logits);
    let mut grad: Vec<f64> = log_p.iter().map(|lp| lp.exp()).collect();
    grad[label] -= 1.0;
    Ok((-log_p[label], grad))
}

/// Central-difference gradient estimate of `f` at `point`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = squared_distance(a, b).sqrt();
    diff / norm(a).max(norm(b)).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Optimizer state for one parameter set.
///
/// Adam moments are zero-initialised lazily on the first step so the state
/// can be created before the parameter layout is known.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    grad_clip: Option<f64>,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, grad_clip: Option<f64>) -> Self {
        Self {
            kind,
            learning_rate,
            grad_clip,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, None)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate, None)
    }

    pub fn with_grad_clip(mut self, clip: Option<f64>) -> Self {
        self.grad_clip = clip;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. Gradients are clipped by global norm before the
    /// moment update; a non-finite gradient leaves all state untouched.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape())
        {
            return Err(Error::domain("parameter and gradient shapes differ"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let mut scale = 1.0;
        if let Some(clip) = self.grad_clip {
            let total: f64 = grads.iter().map(Matrix::frobenius_sq).sum::<f64>().sqrt();
            if total > clip {
                scale = clip / total;
            }
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.add_scaled(-lr * scale, g);
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    self.first_moment = params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let t = self.step_count as f64;
                let bias1 = 1.0 - ADAM_BETA1.powf(t);
                let bias2 = 1.0 - ADAM_BETA2.powf(t);
                for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[idx].data;
                    let v = &mut self.second_moment[idx].data;
                    for (k, (pk, &gk)) in p.data.iter_mut().zip(&g.data).enumerate() {
                        let gk = gk * scale;
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                        let m_hat = m[k] / bias1;
                        let v_hat = v[k] / bias2;
                        *pk -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Flattens a parameter list into one vector.
pub fn flatten(parts: &[Matrix]) -> Vec<f64> {
    parts.iter().flat_map(|m| m.data.iter().copied()).collect()
}

/// Inverse of [`flatten`] using `template` for the shapes.
pub fn unflatten(template: &[Matrix], flat: &[f64]) -> Vec<Matrix> {
    let mut offset = 0;
    template
        .iter()
        .map(|m| {
            let n = m.len();
            let out = Matrix {
                rows: m.rows,
                cols: m.cols,
                data: flat[offset..offset + n].to_vec(),
            };
            offset += n;
            out
        })
        .collect()
}
