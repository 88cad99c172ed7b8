//! Minimal dense f32 tensors in row-major layout.
//!
//! Only what the attention stack needs: matmul, row softmax, affine maps,
//! layer norm, GELU and a few elementwise ops. Every op checks its output for
//! NaN/Inf and reports it as an error instead of propagating it.

use std::fmt;

use thiserror::Error;

use crate::par;
use crate::rng::{NormalStream, RngSeed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a {expected}-d tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were given")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { op, index }),
        None => Ok(()),
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                got: data.len(),
            });
        }
        check_finite("new", &data)?;
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs: checks finiteness, trusts shape.
    fn from_op(op: &'static str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(op, &data)?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
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

    /// (rows, cols) of a 2-d tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Copy of columns `start..start + width` of a 2-d tensor.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        let (m, n) = self.dims2("column_block")?;
        if start + width > n {
            return Err(TensorError::Invalid(format!(
                "column block {start}..{} out of range for {n} columns",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + width]);
        }
        Ok(Tensor {
            shape: vec![m, width],
            data: out,
        })
    }

    /// Rows selected by index, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (m, n) = self.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(TensorError::Invalid(format!("row {i} out of range ({m})")));
            }
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Tensor {
            shape: vec![indices.len(), n],
            data: out,
        })
    }

    /// Multiply row `i` by `weights[i]`.
    pub fn scale_rows(&self, weights: &[f32]) -> Result<Self> {
        let (m, n) = self.dims2("scale_rows")?;
        if weights.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: self.shape.clone(),
                right: vec![weights.len()],
            });
        }
        let mut out = self.data.clone();
        for (i, w) in weights.iter().enumerate() {
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= w);
        }
        Tensor::from_op("scale_rows", self.shape.clone(), out)
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn index_leading(&self, i: usize) -> Result<Self> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(TensorError::Invalid(format!(
                "index {i} invalid for shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}

/// Standard matrix product `a · b`.
///
/// Each output row is accumulated independently in `k` order, so a row's
/// value never depends on which other rows are in the batch. Region attention
/// relies on this to stay bit-identical with plain cross-attention.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (&a.data, &b.data);
    par::for_each_row(&mut out, n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
    Tensor::from_op("matmul", vec![m, n], out)
}

/// Row-wise softmax with max subtraction. Row sums are accumulated in f64.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("softmax_rows")?;
    check_finite("softmax_rows", &x.data)?;
    let mut out = x.data.clone();
    par::for_each_row(&mut out, n, |_, row| softmax_in_place(row));
    Tensor::from_op("softmax_rows", vec![m, n], out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn check_bias(op: &'static str, b: &Tensor, n: usize) -> Result<()> {
    if b.shape.as_slice() != [n] {
        return Err(TensorError::ShapeMismatch {
            op,
            left: vec![n],
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Affine map `x · w + b` with `b` broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, n) = w.dims2("linear")?;
    check_bias("linear", b, n)?;
    let mut y = matmul(x, w)?;
    add_row_in_place(&mut y, b.data());
    check_finite("linear", &y.data)?;
    Ok(y)
}

fn add_row_in_place(y: &mut Tensor, b: &[f32]) {
    let n = b.len();
    par::for_each_row(&mut y.data, n, |_, row| {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    });
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-row normalization to zero mean, unit variance, then `gain`/`bias`.
/// Mean and variance are accumulated in f64 (population variance).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let (m, d) = x.dims2("layer_norm")?;
    if d == 0 {
        return Err(TensorError::Invalid("layer_norm over zero features".into()));
    }
    check_bias("layer_norm", gain, d)?;
    check_bias("layer_norm", bias, d)?;
    let (g, b) = (gain.data(), bias.data());
    let mut out = x.data.clone();
    par::for_each_row(&mut out, d, |_, row| {
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
        for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
            *v = (((*v as f64 - mean) * inv) as f32) * gv + bv;
        }
    });
    Tensor::from_op("layer_norm", vec![m, d], out)
}

/// GELU, tanh approximation, evaluated in f64 per element.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::from_op("gelu", x.shape.clone(), data)
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_op(op, a.shape.clone(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f32) -> Result<Tensor> {
    let data = a.data.iter().map(|&v| v * s).collect();
    Tensor::from_op("scale", a.shape.clone(), data)
}

/// Deterministic N(0, scale²) fill: SplitMix64 + Box–Muller.
pub fn seeded_normal(shape: Vec<usize>, seed: RngSeed, scale: f32) -> Result<Tensor> {
    let mut stream = NormalStream::new(seed);
    normal_from_stream(shape, &mut stream, scale)
}

/// Same as [`seeded_normal`] but continues an existing stream.
pub fn normal_from_stream(shape: Vec<usize>, stream: &mut NormalStream, scale: f32) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(TensorError::Invalid(format!("scale must be > 0, got {scale}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (stream.next_normal() * scale as f64) as f32)
        .collect();
    Tensor::from_op("seeded_normal", shape, data)
}
