//! Small differentiable building blocks on top of candle.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// `ln(1 + e^x)` without overflow: `relu(x) + ln(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Rows of `x` (shape `[n, d]`) scaled to unit norm. Zero rows stay zero.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let safe = norm.maximum(1e-12)?;
    Ok(x.broadcast_div(&safe)?)
}

/// Interpolation matrix `[out, in]` for 1-D linear resampling with half-pixel
/// centers (`align_corners = false`), edge-clamped.
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of an NCHW tensor, expressed as two matrix products so it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let mh = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dtype)?;
    let mw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(dtype)?.t()?;
    let flat = x.reshape((b * c, h, w))?;
    let rows = mh.broadcast_matmul(&flat)?;
    let both = rows.broadcast_matmul(&mw)?;
    Ok(both.reshape((b, c, out_h, out_w))?)
}

/// Average-pool or bilinear-resize to a square side, whichever applies.
pub fn downsample_to(x: &Tensor, side: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == side && w == side {
        Ok(x.clone())
    } else if h == w && h > side && h % side == 0 {
        Ok(x.avg_pool2d(h / side)?)
    } else {
        resize_bilinear(x, side, side)
    }
}

/// Stride-1 convolution with `same` padding for odd kernels, plus a per-channel bias.
pub fn conv2d_same(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let k = weight.dim(3)?;
    let y = x.conv2d(weight, k / 2, 1, 1, 1)?;
    let c = bias.dim(0)?;
    Ok(y.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn from_f64(values: Vec<f64>, dims: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(dtype)?)
}
