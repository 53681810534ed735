//! Dense row-major `f32` tensors and the handful of kernels the encoder needs.
//!
//! Every kernel is a pure function. Reductions run in a fixed order and
//! accumulate in `f64`, so repeated calls on the same input are bit-identical
//! regardless of how many threads the rayon pool has.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work threshold (m·k·n) above which `matmul` splits rows across the rayon pool.
const PAR_MATMUL_WORK: usize = 1 << 18;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape("dims2", format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.cols())
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} out of 0..{r}")));
        }
        Tensor::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} out of 0..{c}")));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for row in self.row_iter() {
            data.extend_from_slice(&row[start..end]);
        }
        Tensor::new(vec![r, end - start], data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], data)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `a·self + b·other`, the shape of every residual update in the encoder.
    pub fn axpby(&self, a: f32, other: &Tensor, b: f32) -> Result<Tensor> {
        self.zip_with(other, "axpby", |x, y| a * x + b * y)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f32]) -> Result<Tensor> {
        if bias.len() != self.cols() {
            return Err(Error::shape(
                "add_row_vector",
                format!("bias length {} vs {} columns", bias.len(), self.cols()),
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(bias.len()) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }
}

/// `a[m×k] · b[k×n]`, dot products accumulated in `f64` with `k` ascending.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let bd = b.data();
    let row_kernel = |(i, out): (usize, &mut [f32])| {
        let mut acc = vec![0.0f64; n];
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &bd[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out.iter_mut().zip(acc) {
            *o = s as f32;
        }
    };
    let mut data = vec![0.0f32; m * n];
    if m * k * n >= PAR_MATMUL_WORK && m > 1 {
        data.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        data.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    let out = Tensor::new(vec![m, n], data)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `x·w + bias`, with `w` stored input-major (`[in × out]`).
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul(x, w)?;
    match bias {
        Some(b) => y.add_row_vector(b.data()),
        None => Ok(y),
    }
}

/// Per-row layer normalisation with a 1/D variance divisor.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("width {d}, gain {}, bias {}", gain.len(), bias.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = x.clone();
    let (g, b) = (gain.data(), bias.data());
    for row in out.data.chunks_exact_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
            *v = ((*v as f64 - mean) * inv * gi as f64 + bi as f64) as f32;
        }
    }
    out.ensure_finite("layer_norm")?;
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.cols();
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(m) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = ((*v - max) as f64).exp();
            *v = e as f32;
            sum += e;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    Ok(out)
}

/// Error function, accurate to ~1e-13 over the real line.
///
/// Maclaurin series below |x| = 3, Laplace continued fraction for erfc above.
pub fn erf(x: f64) -> f64 {
    let ax = x.abs();
    let r = if ax < 3.0 {
        let x2 = ax * ax;
        let mut term = ax;
        let mut sum = ax;
        for n in 1..200 {
            let n = n as f64;
            term *= -x2 / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        sum * std::f64::consts::FRAC_2_SQRT_PI
    } else if ax < 6.5 {
        // erfc(x) = exp(-x²)/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + …))))
        let mut frac = ax;
        for k in (1..=80).rev() {
            frac = ax + (k as f64 / 2.0) / frac;
        }
        1.0 - (-ax * ax).exp() / (std::f64::consts::PI.sqrt() * frac)
    } else {
        1.0
    };
    r.copysign(x)
}

/// Exact GELU, `x·Φ(x)` with Φ from `erf`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        let xf = *v as f64;
        *v = (0.5 * xf * (1.0 + erf(xf / std::f64::consts::SQRT_2))) as f32;
    }
    out.ensure_finite("gelu")?;
    Ok(out)
}

/// `x·σ(1.702x)`, the activation some CLIP checkpoints were trained with.
pub fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        let xf = *v as f64;
        *v = (xf / (1.0 + (-1.702 * xf).exp())) as f32;
    }
    out.ensure_finite("quick_gelu")?;
    Ok(out)
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    let (m, d2) = b.dims2()?;
    if d != d2 {
        return Err(Error::shape("cosine_rows", format!("widths {d} vs {d2}")));
    }
    let norms = |t: &Tensor| -> Result<Vec<f64>> {
        t.row_iter()
            .enumerate()
            .map(|(i, r)| {
                let s = r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                if s > 0.0 {
                    Ok(s)
                } else {
                    Err(Error::ZeroNorm { op: "cosine_rows", row: i })
                }
            })
            .collect()
    };
    let na = norms(a)?;
    let nb = norms(b)?;
    let mut data = vec![0.0f32; n * m];
    for (i, ra) in a.row_iter().enumerate() {
        for (j, rb) in b.row_iter().enumerate() {
            let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum();
            data[i * m + j] = (dot / (na[i] * nb[j])).clamp(-1.0, 1.0) as f32;
        }
    }
    let out = Tensor::new(vec![n, m], data)?;
    out.ensure_finite("cosine_rows")?;
    Ok(out)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
