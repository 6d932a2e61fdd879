//! Dense row-major f64 tensors and the forward operations the rest of the
//! workbench is built from.
//!
//! Everything is 64-bit: gradient checking against central differences needs
//! the headroom, and nothing here is large enough for single precision to pay.

use crate::error::{Error, Result};

/// Dense tensor: a shape plus row-major `f64` storage.
///
/// The product of the shape extents always equals the data length. Values are
/// validated as finite at the public construction boundary; operations on
/// finite inputs stay finite (softmax is stabilized, layer norm keeps its
/// epsilon inside the square root).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor element {} is {}",
                bad, data[bad]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs; validates only the element count.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; numel])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape, vec![value; numel])
    }

    /// 2-D convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows".to_string()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_parts(vec![1, 1], vec![v])
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

    /// Row count for 2-D tensors.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Column count for 2-D tensors.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_2d(&self, op: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!("{op}: expected 2-D, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_2d("matmul lhs")?;
        let (k2, n) = other.check_2d("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner extents differ ({m}x{k} vs {k2}x{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_2d("matmul_nt lhs")?;
        let (n, k2) = other.check_2d("matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt: inner extents differ ({m}x{k} vs {n}x{k2})"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (j, o) in o_row.iter_mut().enumerate() {
                let b_row = &other.data[j * k..(j + 1) * k];
                *o = dot(a_row, b_row);
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_2d("matmul_tn lhs")?;
        let (m2, n) = other.check_2d("matmul_tn rhs")?;
        if m != m2 {
            return Err(Error::shape(format!(
                "matmul_tn: outer extents differ ({m}x{k} vs {m2}x{n})"
            )));
        }
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let b_row = &other.data[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![k, n], out))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul_elem", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|&v| v * c).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    /// GELU with the tanh approximation; smooth, so finite differences agree.
    pub fn gelu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| gelu_scalar(v)).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.check_2d("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    /// Concatenate 2-D tensors along `axis` (0 = stack rows, 1 = widen columns).
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        match axis {
            0 => {
                let c = parts[0].check_2d("concat")?.1;
                let mut rows = 0;
                for p in parts {
                    let (r, pc) = p.check_2d("concat")?;
                    if pc != c {
                        return Err(Error::shape("concat axis 0: column counts differ"));
                    }
                    rows += r;
                }
                let mut data = Vec::with_capacity(rows * c);
                for p in parts {
                    data.extend_from_slice(&p.data);
                }
                Ok(Tensor::from_parts(vec![rows, c], data))
            }
            1 => {
                let r = parts[0].check_2d("concat")?.0;
                let mut cols = 0;
                for p in parts {
                    let (pr, pc) = p.check_2d("concat")?;
                    if pr != r {
                        return Err(Error::shape("concat axis 1: row counts differ"));
                    }
                    cols += pc;
                }
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for p in parts {
                        data.extend_from_slice(p.row(i));
                    }
                }
                Ok(Tensor::from_parts(vec![r, cols], data))
            }
            _ => Err(Error::invalid(format!("concat: axis {axis} out of range"))),
        }
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.check_2d("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let o = &mut out[i * n..(i + 1) * n];
            softmax_row(row, o);
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Per-row layer normalization followed by the `gamma`/`beta` affine map.
    ///
    /// `gamma` and `beta` are 1×D row vectors; variance is the population
    /// variance of the row.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.check_2d("layer_norm")?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(Error::shape(format!(
                "layer_norm: gamma/beta length {} / {} vs width {n}",
                gamma.numel(),
                beta.numel()
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let o = &mut out[i * n..(i + 1) * n];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                o[j] = (row[j] - mean) * inv * gamma.data[j] + beta.data[j];
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Adds a 1×D row vector to every row of a t×D matrix.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.check_2d("add_row_broadcast")?;
        if bias.numel() != n {
            return Err(Error::shape(format!(
                "add_row_broadcast: bias length {} vs width {n}",
                bias.numel()
            )));
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bias.data[j];
            }
        }
        Ok(Tensor::from_parts(vec![m, n], data))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Dot product with four accumulators so the loop is not latency-bound.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let ai = &a[i * 4..i * 4 + 4];
        let bi = &b[i * 4..i * 4 + 4];
        acc[0] += ai[0] * bi[0];
        acc[1] += ai[1] * bi[1];
        acc[2] += ai[2] * bi[2];
        acc[3] += ai[3] * bi[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub(crate) fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
