//! Value-level kernels. The tape wraps these and adds backward rules.

use super::{NumericsError, Tensor, MASK_NEG};

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where `op`
/// optionally transposes. `a` is `m × k` after `op`, `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Row-major strides of op(a) and op(b).
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: buffer lengths are checked above and the strides describe
    // exactly an m×k, k×n and m×n row-major layout over those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn require_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(NumericsError::ShapeMismatch {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = require_matrix(a, "matmul")?;
    let (k2, n) = require_matrix(b, "matmul")?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out, "matmul"))
}

/// `a[m×k] · b[n×k]ᵀ`, without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = require_matrix(a, "matmul_nt")?;
    let (n, k2) = require_matrix(b, "matmul_nt")?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out, "matmul_nt"))
}

pub fn transpose(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (r, c) = require_matrix(a, "transpose")?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out, "transpose"))
}

/// True when a mask entry blocks attention.
pub fn is_blocked(mask_value: f64) -> bool {
    mask_value <= MASK_NEG * 0.5
}

/// How a mask lines up against a score tensor.
#[derive(Clone, Copy, Debug)]
pub(crate) enum MaskLayout {
    Full,
    PerColumn,
}

pub(crate) fn mask_layout(scores: &Tensor, mask: &Tensor) -> Result<MaskLayout, NumericsError> {
    if mask.cols() != scores.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "masked_softmax",
            left: scores.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    if mask.len() == scores.len() {
        Ok(MaskLayout::Full)
    } else if mask.rows() == 1 {
        Ok(MaskLayout::PerColumn)
    } else {
        Err(NumericsError::ShapeMismatch {
            op: "masked_softmax",
            left: scores.shape().to_vec(),
            right: mask.shape().to_vec(),
        })
    }
}

/// Row-wise softmax of `scores + mask` over the last axis.
///
/// Returns the probabilities and the number of rows whose every entry was
/// blocked; such rows come back as all zeros.
pub fn masked_softmax(
    scores: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, usize), NumericsError> {
    let layout = match mask {
        Some(m) => Some(mask_layout(scores, m)?),
        None => None,
    };
    let cols = scores.cols();
    let rows = scores.rows();
    let mut out = vec![0.0; scores.len()];
    let mut fully_masked = 0;
    let mut shifted = vec![0.0; cols];
    for r in 0..rows {
        let s = scores.row_slice(r);
        let m: Option<&[f64]> = match (mask, layout) {
            (Some(mt), Some(MaskLayout::Full)) => Some(mt.row_slice(r)),
            (Some(mt), Some(MaskLayout::PerColumn)) => Some(mt.row_slice(0)),
            _ => None,
        };
        if let Some(m) = m {
            if m.iter().all(|&v| is_blocked(v)) {
                fully_masked += 1;
                continue;
            }
        }
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            let v = s[j] + m.map_or(0.0, |m| m[j]);
            shifted[j] = v;
            if v > max {
                max = v;
            }
        }
        let mut total = 0.0;
        let o = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let e = (shifted[j] - max).exp();
            o[j] = e;
            total += e;
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok((
        Tensor::from_parts(scores.shape().to_vec(), out, "masked_softmax"),
        fully_masked,
    ))
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache), NumericsError> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(NumericsError::InvalidArgument("layer_norm eps must be positive"));
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let g = gain.data();
    let b = bias.data();
    for r in 0..rows {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let n = (row[j] - mean) * istd;
            normalized[r * d + j] = n;
            out[r * d + j] = n * g[j] + b[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out, "layer_norm"),
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Per-row zero-mean, unit-variance normalization followed by `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
    layer_norm_forward(x, gain, bias, eps).map(|(t, _)| t)
}

/// Row-wise softmax without masking, used by cross-entropy.
pub(crate) fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    let cols = logits.cols();
    let mut out = vec![0.0; logits.len()];
    for r in 0..logits.rows() {
        let row = logits.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - max).exp();
            total += *dst;
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`. Returns the loss and the softmax probabilities.
pub(crate) fn cross_entropy_forward(
    logits: &Tensor,
    targets: &[usize],
) -> Result<(f64, Vec<f64>), NumericsError> {
    let (n, c) = require_matrix(logits, "cross_entropy")?;
    if targets.len() != n {
        return Err(NumericsError::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(NumericsError::TargetOutOfRange { target: bad, classes: c });
    }
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    Ok((loss / n as f64, softmax_rows(logits)))
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64, NumericsError> {
    cross_entropy_forward(logits, targets).map(|(l, _)| l)
}
