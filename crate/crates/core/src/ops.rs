//! Differentiable building blocks shared by the encoder, decoders and heads.
//!
//! All linear weights are stored input-major, `(in, out)`, so a linear map is
//! `x @ w + b` without a transpose.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-6;

/// Numeric precision of a parameter set and its activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn from_dtype(dtype: DType) -> Option<Self> {
        match dtype {
            DType::F32 => Some(Precision::F32),
            DType::F64 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// `x @ w + b` over the last dimension of `x`, for any leading shape.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (in_dim, out_dim) = w.dims2()?;
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((lead, in_dim))?.matmul(w)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_shape = dims;
    *out_shape.last_mut().unwrap() = out_dim;
    Ok(y.reshape(out_shape)?)
}

/// Exact GELU `x·Φ(x)`, composed from `erf` so its gradient is exact in f64
/// (the fused candle kernel truncates 1/√(2π) in its backward pass).
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let cdf = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok((x * cdf)?.affine(0.5, 0.0)?)
}

pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// Softmax over the last dimension. The max shift is detached: it cancels
/// analytically, so it carries no gradient.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise L2 normalization over the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// Numerically stable binary cross-entropy on logits, averaged over all entries.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // max(x, 0) - x*y + log(1 + exp(-|x|))
    let pos = logits.relu()?;
    let xy = (logits * targets)?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((pos - xy)? + softplus)?.mean_all()?)
}

/// Soft Dice loss on sigmoid probabilities, averaged over the batch.
/// `logits` and `targets` are `(batch, ...)`.
pub fn dice_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let b = logits.dim(0)?;
    let probs = candle_nn::ops::sigmoid(logits)?.reshape((b, ()))?;
    let t = targets.reshape((b, ()))?;
    let inter = (&probs * &t)?.sum(1)?;
    let denom = (probs.sum(1)? + t.sum(1)?)?;
    let smooth = 1.0;
    let dice = ((inter * 2.0)? + smooth)?.div(&(denom + smooth)?)?;
    Ok((dice.neg()? + 1.0)?.mean_all()?)
}

/// Row-major `(rows, cols)` tensor of the given precision from f64 data.
pub fn tensor_from_f64(data: &[f64], shape: &[usize], precision: Precision) -> Result<Tensor> {
    let t = Tensor::from_slice(data, shape, &Device::Cpu)?;
    Ok(match precision {
        Precision::F64 => t,
        Precision::F32 => t.to_dtype(DType::F32)?,
    })
}

/// Flattened copy of a tensor's values as f64.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
