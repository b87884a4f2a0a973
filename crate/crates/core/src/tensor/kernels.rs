//! Forward kernels on plain tensors.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 20;

/// `C = A·B` for row-major slices, `A: m×k`, `B: k×n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(i, out): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &b_lj) in out.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `C = A·Bᵀ`, `A: m×k`, `B: n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(i, out): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `C = Aᵀ·B`, `A: k×m`, `B: k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    gemm(&transpose_raw(a, k, m), b, m, k, n)
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let c = Tensor::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n));
    c.check_finite("matmul output")?;
    Ok(c)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.matrix_dims()?;
    Ok(Tensor::from_parts(vec![c, r], transpose_raw(a.data(), r, c)))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    m.check_finite("softmax input")?;
    let (r, c) = m.matrix_dims()?;
    let mut out = m.data().to_vec();
    for row in out.chunks_mut(c.max(1)).take(r) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(m.shape().to_vec(), out))
}

/// Normalized values and reciprocal standard deviations from a column-wise
/// layer norm, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Layer norm over the rows of each column of a `D×N` matrix (each column is
/// one token); a 1-D input is a single column.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let (d, n) = x.matrix_dims()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if d == 0 || eps <= 0.0 {
        return Err(Error::Contract("layer_norm needs D >= 1 and eps > 0".into()));
    }
    let xs = x.data();
    let mut xhat = vec![0.0; d * n];
    let mut inv_std = vec![0.0; n];
    let mut out = vec![0.0; d * n];
    for j in 0..n {
        let mean = (0..d).map(|i| xs[i * n + j]).sum::<f64>() / d as f64;
        let var = (0..d)
            .map(|i| (xs[i * n + j] - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std[j] = s;
        for i in 0..d {
            let h = (xs[i * n + j] - mean) * s;
            xhat[i * n + j] = h;
            out[i * n + j] = gamma.data()[i] * h + beta.data()[i];
        }
    }
    let t = Tensor::from_parts(x.shape().to_vec(), out);
    t.check_finite("layer_norm output")?;
    Ok((t, NormCache { xhat, inv_std }))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}
