//! Dense row-major `f64` tensors, a reverse-mode tape and the Adam optimizer.
//!
//! Everything the denoiser needs is two-dimensional: vectors are stored as
//! `1 x n` matrices. The free functions in this module ([`matmul`],
//! [`softmax`], [`attention`], ...) are the eager versions of the ops
//! recorded by [`Graph`]; the denoiser uses the tape, tests use both.

mod graph;
mod optim;

pub use graph::{grad_of, Gradients, Graph, NodeId, ParamStore};
pub use optim::AdamState;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("softmax axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a `rows x cols` matrix. Panics if `data` has the wrong length.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "from_vec: length mismatch");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self::from_vec(rows, cols, vec![v; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = standard_normal_vec(rng, rows * cols)
            .into_iter()
            .map(|x| x * std)
            .collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent (1 for a vector).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: vec![rows, cols],
            });
        }
        Ok(Self::from_vec(rows, cols, self.data.clone()))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_vec(c, r, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Draws `n` standard-normal values. Bit-reproducible for a given seeded rng.
pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_vec(m, n, out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

/// Numerically stabilized softmax along `axis` of a rank-1 or rank-2 tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = x.shape.len();
    if axis >= rank.max(1) || rank > 2 {
        return Err(TensorError::BadAxis { axis, rank });
    }
    if rank == 2 && axis == 0 {
        return Ok(softmax_rows(&x.transpose()).transpose());
    }
    let out = softmax_rows(&x.reshape(x.rows(), x.cols())?);
    Tensor::new(x.shape.clone(), out.data)
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in &mut out[i * c..(i + 1) * c] {
            *o /= z;
        }
    }
    Tensor::from_vec(r, c, out)
}

/// `softmax(Q Kᵀ / √d) V`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.cols() != k.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: q.shape.clone(),
            right: k.shape.clone(),
        });
    }
    if k.rows() != v.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: k.shape.clone(),
            right: v.shape.clone(),
        });
    }
    let scores = scale(&matmul(q, &k.transpose())?, 1.0 / (q.cols() as f64).sqrt());
    matmul(&softmax_rows(&scores), v)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization with per-column gain and bias (`1 x n`).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    let mut out = normalize_rows(x);
    for i in 0..out.rows() {
        for j in 0..c {
            let v = out.get(i, j) * gain.data[j] + bias.data[j];
            out.set(i, j, v);
        }
    }
    Ok(out)
}

pub(crate) fn normalize_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    Tensor::from_vec(r, c, out)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Sinusoidal embedding of a (possibly fractional) timestep, `1 x dim`.
///
/// First half sines, second half cosines, frequencies `10000^(-i/half)`.
pub fn time_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    Tensor::row_vector(out)
}
