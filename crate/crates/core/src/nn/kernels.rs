//! Hand-written CPU kernels with explicit backward passes for the
//! convolutions that dominate training time: depthwise 3x3, the
//! spatially-adaptive mixed depthwise 3x3 and im2col for dense convs.
//!
//! Each op works for `f32` and `f64` and requires nothing from its inputs'
//! layouts (they are made contiguous first). The backward passes are plain
//! loops and do not themselves record gradients.

use std::ops::Range;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

type CResult<T> = candle_core::Result<T>;

fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

fn to_vec<T: WithDType>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// Offsets and valid output ranges for 3x3 tap `t` with zero padding 1.
#[inline]
fn tap(t: usize, h: usize, w: usize) -> (isize, isize, Range<usize>, Range<usize>) {
    let oy = (t / 3) as isize - 1;
    let ox = (t % 3) as isize - 1;
    let ys = (-oy).max(0) as usize..(h as isize - oy.max(0)) as usize;
    let xs = (-ox).max(0) as usize..(w as isize - ox.max(0)) as usize;
    (oy, ox, ys, xs)
}

/// `out += correlate(inp, k)` on one `h x w` plane.
fn correlate<T: WithDType>(inp: &[T], k: &[T], out: &mut [T], h: usize, w: usize) {
    for (t, &kv) in k.iter().enumerate().take(9) {
        let (oy, ox, ys, xs) = tap(t, h, w);
        for y in ys {
            let dst = y * w;
            let src = ((y as isize + oy) as usize * w) as isize + ox;
            let o = &mut out[dst + xs.start..dst + xs.end];
            let i = &inp[(src + xs.start as isize) as usize..(src + xs.end as isize) as usize];
            for (ov, iv) in o.iter_mut().zip(i) {
                *ov += kv * *iv;
            }
        }
    }
}

/// Adjoint of [`correlate`] with respect to its input: `gin += correlate^T(g, k)`.
fn correlate_adjoint<T: WithDType>(g: &[T], k: &[T], gin: &mut [T], h: usize, w: usize) {
    for (t, &kv) in k.iter().enumerate().take(9) {
        let (oy, ox, ys, xs) = tap(t, h, w);
        for y in ys {
            let dst = y * w;
            let src = ((y as isize + oy) as usize * w) as isize + ox;
            let gi = &mut gin[(src + xs.start as isize) as usize..(src + xs.end as isize) as usize];
            let go = &g[dst + xs.start..dst + xs.end];
            for (a, b) in gi.iter_mut().zip(go) {
                *a += kv * *b;
            }
        }
    }
}

/// `gk[t] += sum_p g[p] * inp[p + tap_t]`.
fn kernel_grad<T: WithDType>(inp: &[T], g: &[T], gk: &mut [T], h: usize, w: usize) {
    for (t, gkv) in gk.iter_mut().enumerate().take(9) {
        let (oy, ox, ys, xs) = tap(t, h, w);
        let mut acc = T::zero();
        for y in ys {
            let dst = y * w;
            let src = ((y as isize + oy) as usize * w) as isize + ox;
            let go = &g[dst + xs.start..dst + xs.end];
            let i = &inp[(src + xs.start as isize) as usize..(src + xs.end as isize) as usize];
            for (a, b) in go.iter().zip(i) {
                acc += *a * *b;
            }
        }
        *gkv += acc;
    }
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident, $($arg:expr),*) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            dt => candle_core::bail!("kernel does not support {dt:?}"),
        }
    };
}

struct Depthwise3x3;

fn dw_fwd<T: WithDType>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (n, c, h, w) = l1.shape().dims4()?;
    let x = contiguous_slice::<T>(s1, l1)?;
    let k = contiguous_slice::<T>(s2, l2)?;
    let plane = h * w;
    let mut out = vec![T::zero(); n * c * plane];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            correlate(&x[off..off + plane], &k[ch * 9..ch * 9 + 9], &mut out[off..off + plane], h, w);
        }
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

fn dw_bwd<T: WithDType>(x: &Tensor, k: &Tensor, g: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
    let (n, c, h, w) = x.dims4()?;
    let (xv, kv, gv) = (to_vec::<T>(x)?, to_vec::<T>(k)?, to_vec::<T>(g)?);
    let plane = h * w;
    let mut gx = vec![T::zero(); xv.len()];
    let mut gk = vec![T::zero(); kv.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let kk = &kv[ch * 9..ch * 9 + 9];
            correlate_adjoint(&gv[off..off + plane], kk, &mut gx[off..off + plane], h, w);
            kernel_grad(&xv[off..off + plane], &gv[off..off + plane], &mut gk[ch * 9..ch * 9 + 9], h, w);
        }
    }
    Ok((
        Some(Tensor::from_vec(gx, x.shape(), x.device())?),
        Some(Tensor::from_vec(gk, k.shape(), k.device())?),
    ))
}

impl CustomOp2 for Depthwise3x3 {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1.dtype(), dw_fwd, s1, l1, s2, l2)
    }

    fn bwd(&self, x: &Tensor, k: &Tensor, _res: &Tensor, g: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        dispatch!(x.dtype(), dw_bwd, x, k, g)
    }
}

/// Depthwise 3x3 cross-correlation with zero padding 1 and no bias.
/// `x: (N, C, H, W)`, `kernel: (C, 3, 3)`.
pub fn depthwise3x3(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (kc, kh, kw) = kernel.dims3()?;
    if (kc, kh, kw) != (c, 3, 3) {
        return Err(Error::shape(format!(
            "depthwise kernel {:?} does not fit {c} channels",
            kernel.dims()
        )));
    }
    let kernel = kernel.to_dtype(x.dtype())?;
    Ok(x.contiguous()?.apply_op2(&kernel.contiguous()?, Depthwise3x3)?)
}

struct SpatiallyAdaptive3x3;

fn sac_fwd<T: WithDType>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> CResult<(CpuStorage, Shape)> {
    let (n, c, h, w) = l1.shape().dims4()?;
    let (k, _, _, _) = l2.shape().dims4()?;
    let x = contiguous_slice::<T>(s1, l1)?;
    let bank = contiguous_slice::<T>(s2, l2)?;
    let wm = contiguous_slice::<T>(s3, l3)?;
    let plane = h * w;
    let mut out = vec![T::zero(); n * c * plane];
    let mut tmp = vec![T::zero(); plane];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let xp = &x[off..off + plane];
            for j in 0..k {
                tmp.fill(T::zero());
                let kk = &bank[(j * c + ch) * 9..(j * c + ch) * 9 + 9];
                correlate(xp, kk, &mut tmp, h, w);
                let woff = (b * k + j) * plane;
                let wp = &wm[woff..woff + plane];
                for ((o, t), wv) in out[off..off + plane].iter_mut().zip(&tmp).zip(wp) {
                    *o += *wv * *t;
                }
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

type Grads3 = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn sac_bwd<T: WithDType>(x: &Tensor, bank: &Tensor, wm: &Tensor, g: &Tensor) -> CResult<Grads3> {
    let (n, c, h, w) = x.dims4()?;
    let k = bank.dims()[0];
    let (xv, bv, wv, gv) = (to_vec::<T>(x)?, to_vec::<T>(bank)?, to_vec::<T>(wm)?, to_vec::<T>(g)?);
    let plane = h * w;
    let mut gx = vec![T::zero(); xv.len()];
    let mut gb = vec![T::zero(); bv.len()];
    let mut gw = vec![T::zero(); wv.len()];
    let mut tmp = vec![T::zero(); plane];
    let mut gj = vec![T::zero(); plane];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let xp = &xv[off..off + plane];
            let gp = &gv[off..off + plane];
            for j in 0..k {
                let koff = (j * c + ch) * 9;
                let kk = &bv[koff..koff + 9];
                let woff = (b * k + j) * plane;
                tmp.fill(T::zero());
                correlate(xp, kk, &mut tmp, h, w);
                for p in 0..plane {
                    gw[woff + p] += gp[p] * tmp[p];
                    gj[p] = wv[woff + p] * gp[p];
                }
                correlate_adjoint(&gj, kk, &mut gx[off..off + plane], h, w);
                kernel_grad(xp, &gj, &mut gb[koff..koff + 9], h, w);
            }
        }
    }
    Ok((
        Some(Tensor::from_vec(gx, x.shape(), x.device())?),
        Some(Tensor::from_vec(gb, bank.shape(), bank.device())?),
        Some(Tensor::from_vec(gw, wm.shape(), wm.device())?),
    ))
}

impl CustomOp3 for SpatiallyAdaptive3x3 {
    fn name(&self) -> &'static str {
        "spatially-adaptive3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1.dtype(), sac_fwd, s1, l1, s2, l2, s3, l3)
    }

    fn bwd(&self, x: &Tensor, bank: &Tensor, wm: &Tensor, _res: &Tensor, g: &Tensor) -> CResult<Grads3> {
        dispatch!(x.dtype(), sac_bwd, x, bank, wm, g)
    }
}

/// Per-location mixed depthwise 3x3 conv. `x: (N, C, H, W)`,
/// `bank: (K, C, 3, 3)`, `weights: (N, K, H, W)`; shapes must already agree.
pub fn spatially_adaptive3x3(x: &Tensor, bank: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (k, bc, kh, kw) = bank.dims4()?;
    if (bc, kh, kw) != (c, 3, 3) || weights.dims() != [n, k, h, w] {
        return Err(Error::shape(format!(
            "incompatible shapes x {:?}, bank {:?}, weights {:?}",
            x.dims(),
            bank.dims(),
            weights.dims()
        )));
    }
    let dt = x.dtype();
    Ok(x.contiguous()?.apply_op3(
        &bank.to_dtype(dt)?.contiguous()?,
        &weights.to_dtype(dt)?.contiguous()?,
        SpatiallyAdaptive3x3,
    )?)
}

struct Im2Col {
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Im2Col {
    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Calls `f(col_index, src_index)` for every in-bounds (output, kernel) pair of
    /// one image, where columns are laid out `(ho, wo, c, ky, kx)`.
    #[inline]
    fn for_each(&self, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let row = c * k * k;
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * row;
                for ch in 0..c {
                    for ky in 0..k {
                        let y = (oy * self.stride + ky) as isize - self.padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ox * self.stride + kx) as isize - self.padding as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            f(base + (ch * k + ky) * k + kx, (ch * h + y as usize) * w + xx as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col_fwd<T: WithDType>(op: &Im2Col, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (n, c, h, w) = l.shape().dims4()?;
    let x = contiguous_slice::<T>(s, l)?;
    let (ho, wo) = op.out_size(h, w);
    let per_out = ho * wo * c * op.kernel * op.kernel;
    let per_in = c * h * w;
    let mut out = vec![T::zero(); n * per_out];
    for b in 0..n {
        let o = &mut out[b * per_out..(b + 1) * per_out];
        let i = &x[b * per_in..(b + 1) * per_in];
        op.for_each(c, h, w, |dst, src| o[dst] = i[src]);
    }
    let shape = Shape::from((n, ho * wo, c * op.kernel * op.kernel));
    Ok((T::to_cpu_storage_owned(out), shape))
}

fn im2col_bwd<T: WithDType>(op: &Im2Col, x: &Tensor, g: &Tensor) -> CResult<Option<Tensor>> {
    let (n, c, h, w) = x.dims4()?;
    let gv = to_vec::<T>(g)?;
    let (ho, wo) = op.out_size(h, w);
    let per_out = ho * wo * c * op.kernel * op.kernel;
    let per_in = c * h * w;
    let mut gx = vec![T::zero(); n * per_in];
    for b in 0..n {
        let gi = &mut gx[b * per_in..(b + 1) * per_in];
        let go = &gv[b * per_out..(b + 1) * per_out];
        op.for_each(c, h, w, |dst, src| gi[src] += go[dst]);
    }
    Ok(Some(Tensor::from_vec(gx, x.shape(), x.device())?))
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        match s.dtype() {
            DType::F32 => im2col_fwd::<f32>(self, s, l),
            DType::F64 => im2col_fwd::<f64>(self, s, l),
            dt => candle_core::bail!("im2col does not support {dt:?}"),
        }
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, g: &Tensor) -> CResult<Option<Tensor>> {
        match x.dtype() {
            DType::F32 => im2col_bwd::<f32>(self, x, g),
            DType::F64 => im2col_bwd::<f64>(self, x, g),
            dt => candle_core::bail!("im2col does not support {dt:?}"),
        }
    }
}

/// Dense convolution (cross-correlation) without bias via im2col + matmul.
/// `x: (N, C, H, W)`, `weight: (O, C, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(Error::shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    if h + 2 * padding < k || w + 2 * padding < k || stride == 0 {
        return Err(Error::shape(format!(
            "conv kernel {k} with padding {padding} does not fit {h}x{w}"
        )));
    }
    let op = Im2Col {
        kernel: k,
        stride,
        padding,
    };
    let (ho, wo) = op.out_size(h, w);
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?
    } else {
        x.contiguous()?.apply_op1(op)?
    };
    // Per-sample matmul keeps every image's result independent of the batch.
    let wmat = weight.reshape((1, o, c * k * k))?.broadcast_as((n, o, c * k * k))?.contiguous()?;
    let y = wmat.matmul(&cols.transpose(1, 2)?)?;
    Ok(y.reshape((n, o, ho, wo))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use crate::nn::ops;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn depthwise_matches_tap_composition() {
        for (h, w) in [(1, 1), (2, 5), (6, 4)] {
            let x = random(&[2, 3, h, w], 1);
            let k = random(&[3, 3, 3], 2);
            let fused = depthwise3x3(&x, &k).unwrap();
            let composed = ops::depthwise_conv3x3_reference(&x, &k).unwrap();
            assert!(max_diff(&fused, &composed) < 1e-12);
        }
    }

    #[test]
    fn depthwise_gradients() {
        let k = random(&[2, 3, 3], 3);
        let x = random(&[1, 2, 4, 3], 4);
        let probe = random(&[1, 2, 4, 3], 5);
        let r = check_input_gradient(|t| Ok(depthwise3x3(t, &k)?.mul(&probe)?.sum_all()?), &x, 1e-5).unwrap();
        assert!(r.passes(1e-7), "{r:?}");
        let r = check_input_gradient(|t| Ok(depthwise3x3(&x, t)?.mul(&probe)?.sum_all()?), &k, 1e-5).unwrap();
        assert!(r.passes(1e-7), "{r:?}");
    }

    #[test]
    fn spatially_adaptive_gradients() {
        let x = random(&[2, 2, 3, 4], 6);
        let bank = random(&[3, 2, 3, 3], 7);
        let wm = random(&[2, 3, 3, 4], 8);
        let probe = random(&[2, 2, 3, 4], 9);
        let loss = |a: &Tensor, b: &Tensor, c: &Tensor| -> Result<Tensor> {
            Ok(spatially_adaptive3x3(a, b, c)?.mul(&probe)?.sum_all()?)
        };
        let r = check_input_gradient(|t| loss(t, &bank, &wm), &x, 1e-5).unwrap();
        assert!(r.passes(1e-7), "{r:?}");
        let r = check_input_gradient(|t| loss(&x, t, &wm), &bank, 1e-5).unwrap();
        assert!(r.passes(1e-7), "{r:?}");
        let r = check_input_gradient(|t| loss(&x, &bank, t), &wm, 1e-5).unwrap();
        assert!(r.passes(1e-7), "{r:?}");
    }

    #[test]
    fn conv_matches_candle() {
        for (k, s, p, h) in [(3, 1, 1, 6), (7, 4, 3, 16), (2, 2, 0, 8), (1, 1, 0, 5), (3, 2, 1, 7)] {
            let x = random(&[2, 3, h, h + 1], 10);
            let wt = random(&[4, 3, k, k], 11);
            let ours = conv2d(&x, &wt, s, p).unwrap();
            let theirs = x.conv2d(&wt, p, s, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_diff(&ours, &theirs) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn conv_gradients() {
        let x = random(&[1, 2, 5, 5], 12);
        let wt = random(&[3, 2, 3, 3], 13);
        let probe = random(&[1, 3, 3, 3], 14);
        let r = check_input_gradient(|t| Ok(conv2d(t, &wt, 2, 1)?.mul(&probe)?.sum_all()?), &x, 1e-5).unwrap();
        assert!(r.passes(1e-7), "{r:?}");
        let r = check_input_gradient(|t| Ok(conv2d(&x, t, 2, 1)?.mul(&probe)?.sum_all()?), &wt, 1e-5).unwrap();
        assert!(r.passes(1e-7), "{r:?}");
    }
}
