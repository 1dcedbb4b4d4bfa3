//! Dense row-major tensors and the forward kernels shared by the tape and
//! the detached (no-grad) code paths.

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data).expect("valid matrix")
    }

    pub fn vector(data: &[f64]) -> Self {
        Self::new(&[data.len()], data.to_vec()).expect("non-empty vector")
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows when viewed as a matrix (`shape[0]`).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `out[n, j] = sum_i x[n, i] * w[i, j] + b[j]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, cin) = x.matrix_dims("affine")?;
    let (win, cout) = w.matrix_dims("affine")?;
    if cin != win {
        return Err(Error::shape("affine", x.shape(), w.shape()));
    }
    if b.numel() != cout {
        return Err(Error::shape("affine bias", w.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(n * cout);
    for r in 0..n {
        out.extend_from_slice(b.data());
        let orow = &mut out[r * cout..(r + 1) * cout];
        for (i, &xi) in x.row(r).iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w.data[i * cout..(i + 1) * cout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
    }
    Tensor::new(&[n, cout], out)
}

/// Divides every row by `max(||row||_2, eps)`.
pub fn row_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("row_normalize eps must be > 0, got {eps}")));
    }
    let (_, c) = x.matrix_dims("row_normalize")?;
    let mut data = x.data.clone();
    for row in data.chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in row {
            *v /= norm;
        }
    }
    Tensor::new(x.shape(), data)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_B: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
    let du = GELU_A * (1.0 + 3.0 * GELU_B * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::shape("add", x.shape(), y.shape()));
    }
    let mut out = x.clone();
    out.add_assign(y);
    Ok(out)
}

pub fn sub(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::shape("sub", x.shape(), y.shape()));
    }
    let data = x.data.iter().zip(&y.data).map(|(a, b)| a - b).collect();
    Tensor::new(x.shape(), data)
}

/// Concatenates matrices with equal row counts along the last dimension.
pub fn concat_last_dim(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
    let rows = first.rows();
    for x in xs {
        x.matrix_dims("concat_last_dim")?;
        if x.rows() != rows {
            return Err(Error::shape("concat_last_dim", first.shape(), x.shape()));
        }
    }
    let width: usize = xs.iter().map(|x| x.cols()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for x in xs {
            data.extend_from_slice(x.row(r));
        }
    }
    Tensor::new(&[rows, width], data)
}

/// Column means of a matrix, returned as `[1, C]`.
pub fn mean_pool_rows(x: &Tensor) -> Result<Tensor> {
    let (n, c) = x.matrix_dims("mean_pool_rows")?;
    let mut out = vec![0.0; c];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[1, c], out)
}

/// Elementwise maximum over a set of equally shaped tensors. Returns the
/// maximum and, per element, the index of the winning set member (lowest
/// index on ties).
pub fn max_over_set(xs: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Argument("max_over_set needs at least one tensor".into()))?;
    for x in xs {
        if x.shape() != first.shape() {
            return Err(Error::shape("max_over_set", first.shape(), x.shape()));
        }
    }
    let mut out = first.data.clone();
    let mut arg = vec![0usize; out.len()];
    for (k, x) in xs.iter().enumerate().skip(1) {
        for ((o, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(&x.data) {
            if v > *o {
                *o = v;
                *a = k;
            }
        }
    }
    Ok((Tensor::new(first.shape(), out)?, arg))
}

/// 2x2 non-overlapping mean pooling of row-major grid nodes `[H*W, C]`.
pub fn window_mean_pool(x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (n, c) = x.matrix_dims("window_mean_pool")?;
    let (h, w) = grid;
    if h * w != n {
        return Err(Error::shape("window_mean_pool grid", x.shape(), &[h, w]));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Argument(format!("cannot 2x2-pool odd grid {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..h {
        for x_ in 0..w {
            let dst = ((y / 2) * ow + x_ / 2) * c;
            for (o, v) in out[dst..dst + c].iter_mut().zip(x.row(y * w + x_)) {
                *o += 0.25 * v;
            }
        }
    }
    Tensor::new(&[oh * ow, c], out)
}
