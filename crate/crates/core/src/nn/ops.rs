//! Differentiable tensor helpers built from candle primitives that all have
//! backward rules.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Logistic sigmoid written through `tanh` so neither tail overflows in the
/// backward pass.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Layer normalization over the last dimension with affine parameters.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// The nine zero-padded 3x3 neighbourhood shifts of an `(N, C, H, W)` map, in
/// row-major tap order `(dy, dx)`.
pub fn shifted_taps(x: &Tensor) -> Result<Vec<Tensor>> {
    let (_, _, h, w) = x.dims4()?;
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut taps = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            taps.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    Ok(taps)
}

/// Depthwise 3x3 convolution (cross-correlation, zero padding 1) with a
/// `(C, 3, 3)` kernel and no bias.
pub fn depthwise_conv3x3(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    super::kernels::depthwise3x3(x, kernel)
}

/// Slow composition of primitive ops computing the same as
/// [`depthwise_conv3x3`]; kept as a cross-check for the fused kernel.
pub fn depthwise_conv3x3_reference(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let taps = shifted_taps(x)?;
    depthwise_from_taps(&taps, kernel)
}

/// Same as [`depthwise_conv3x3`] but reusing precomputed taps.
pub fn depthwise_from_taps(taps: &[Tensor], kernel: &Tensor) -> Result<Tensor> {
    let (c, kh, kw) = kernel.dims3()?;
    if (kh, kw) != (3, 3) || taps.len() != 9 {
        return Err(Error::shape(format!(
            "depthwise kernel must be Cx3x3, got {c}x{kh}x{kw}"
        )));
    }
    let channels = taps[0].dim(1)?;
    if channels != c {
        return Err(Error::shape(format!(
            "depthwise kernel has {c} channels, input has {channels}"
        )));
    }
    let flat = kernel.reshape((c, 9))?;
    let mut acc: Option<Tensor> = None;
    for (t, tap) in taps.iter().enumerate() {
        let k = flat.narrow(1, t, 1)?.reshape((1, c, 1, 1))?;
        let term = tap.broadcast_mul(&k)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.expect("nine taps"))
}

/// `(N, L, C)` tokens to an `(N, C, H, W)` map.
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, l, c) = x.dims3()?;
    if l != h * w {
        return Err(Error::shape(format!(
            "token count {l} does not form a {h}x{w} grid"
        )));
    }
    Ok(x.transpose(1, 2)?.reshape((n, c, h, w))?)
}

/// `(N, C, H, W)` map to `(N, H*W, C)` tokens.
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Row-wise L2 normalisation of the last dimension.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + eps)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-50.0, 0.0, 50.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_matches_logistic() {
        let x = Tensor::new(&[-3.0f64, 0.0, 2.5], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in [-3.0f64, 0.0, 2.5].iter().zip(y) {
            assert!((1.0 / (1.0 + (-a).exp()) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_matches_candle_grouped_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 5, 6), &dev).unwrap();
        let k = Tensor::randn(0f32, 1.0, (3, 3, 3), &dev).unwrap();
        let ours = depthwise_conv3x3(&x, &k).unwrap();
        let reference = x.conv2d(&k.reshape((3, 1, 3, 3)).unwrap(), 1, 1, 1, 3).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-5);
    }

    #[test]
    fn token_map_roundtrip() {
        let x = Tensor::arange(0f32, 24.0, &Device::Cpu).unwrap().reshape((1, 2, 3, 4)).unwrap();
        let back = tokens_to_map(&map_to_tokens(&x).unwrap(), 3, 4).unwrap();
        let diff = (x - back).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }
}
