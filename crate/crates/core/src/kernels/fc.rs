//! Fully connected layers as plain matrix products. Inputs of any rank are
//! read as `batch x features`.

use crate::error::{Error, Result};
use crate::kernels::gemm::{gemm_nt, transpose, MAX_REDUCTION};
use crate::qtensor::{AccTensor, QTensor};

fn rows_cols(t: &QTensor, features: usize, context: &'static str) -> Result<usize> {
    let n = t.shape().first().copied().unwrap_or(0);
    if n * features != t.len() {
        return Err(Error::shape(context, &[n, features], t.shape()));
    }
    Ok(n)
}

fn weight_dims(w: &QTensor) -> Result<(usize, usize)> {
    match *w.shape() {
        [o, i] => Ok((o, i)),
        _ => Err(Error::shape("fc weights", &[0, 0], w.shape())),
    }
}

/// `a (N x I) * wᵀ (I x O)`.
pub fn fc_forward(a: &QTensor, w: &QTensor) -> Result<AccTensor> {
    let (o, i) = weight_dims(w)?;
    let n = rows_cols(a, i, "fc_forward input")?;
    if i > MAX_REDUCTION {
        return Err(Error::Network(format!("fc fan-in {i} exceeds the int32 bound")));
    }
    let c = gemm_nt(a.data(), w.data(), n, o, i);
    AccTensor::new(vec![n, o], c, a.scale().saturating_add(w.scale()))
}

/// `e (N x O) * w (O x I)`.
pub fn fc_grad_input(e: &QTensor, w: &QTensor) -> Result<AccTensor> {
    let (o, i) = weight_dims(w)?;
    let n = rows_cols(e, o, "fc_grad_input error")?;
    let wt = transpose(w.data(), o, i);
    let c = gemm_nt(e.data(), &wt, n, i, o);
    AccTensor::new(vec![n, i], c, e.scale().saturating_add(w.scale()))
}

/// `eᵀ (O x N) * a (N x I)`, summed over the batch.
pub fn fc_grad_weight(a: &QTensor, e: &QTensor) -> Result<AccTensor> {
    let n = a.shape().first().copied().unwrap_or(0);
    let i = a.len().checked_div(n).unwrap_or(0);
    rows_cols(a, i, "fc_grad_weight input")?;
    let o = e.len().checked_div(n).unwrap_or(0);
    let ne = rows_cols(e, o, "fc_grad_weight error")?;
    if ne != n {
        return Err(Error::shape("fc_grad_weight batch", &[n], &[ne]));
    }
    let et = transpose(e.data(), n, o);
    let at = transpose(a.data(), n, i);
    let c = gemm_nt(&et, &at, o, i, n);
    AccTensor::new(vec![o, i], c, a.scale().saturating_add(e.scale()))
}
