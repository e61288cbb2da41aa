//! Dense row-major `f64` tensors and the plain (non-tracked) kernels the
//! gradient graph is built from.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let shown: Vec<_> = self.data.iter().take(PREVIEW).collect();
        write!(f, "{shown:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, " .. ({} values)", self.data.len())?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return invalid("shape", format!("dimensions must be positive, got {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            );
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Builds a tensor the caller has already validated. Panics on a bad
    /// shape; only used by kernels in this crate.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("Tensor::from_rows", "ragged rows");
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Samples i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of range for dim {d}");
                acc * d + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            );
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let [m, n] = dims2("transpose2d", self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Rows `[start, start + len)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let [m, n] = dims2("slice_rows", self)?;
        if len == 0 || start + len > m {
            return shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len));
        }
        Ok(Self::from_parts(vec![len, n], self.data[start * n..(start + len) * n].to_vec()))
    }
}

pub(crate) fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match *t.shape() {
        [m, n] => Ok([m, n]),
        ref s => shape_err(op, format!("expected rank 2, got {s:?}")),
    }
}

pub(crate) fn dims3(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [b, m, n] => Ok([b, m, n]),
        ref s => shape_err(op, format!("expected rank 3, got {s:?}")),
    }
}

/// Matrix product of `[M, K]` and `[K, N]`. Each output entry sums over `k`
/// in increasing order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = dims2("matmul", a)?;
    let [k2, n] = dims2("matmul", b)?;
    if k != k2 {
        return shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]: inner dimensions differ"));
    }
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Batched product `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T`
/// when `transpose_b` is set.
pub fn bmm(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let [batch, m, k] = dims3("bmm", a)?;
    let [batch2, r, c] = dims3("bmm", b)?;
    let (k2, n) = if transpose_b { (c, r) } else { (r, c) };
    if batch != batch2 || k != k2 {
        return shape_err("bmm", format!("{:?} x {:?} (transpose_b={transpose_b})", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a_s = &a.data()[bi * m * k..(bi + 1) * m * k];
        let b_s = &b.data()[bi * k * n..(bi + 1) * k * n];
        gemm(a_s, b_s, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n, transpose_b);
    }
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

/// `out += a * b` (or `a * b^T`), row-major, accumulating over `k` in order.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, transpose_b: bool) {
    if transpose_b {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += ar[p] * br[p];
                }
                out[i * n + j] += acc;
            }
        }
    } else {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Softmax over the last dimension with max subtraction.
pub fn softmax_lastdim(t: &Tensor) -> Tensor {
    let n = t.last_dim();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
