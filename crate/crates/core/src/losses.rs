//! Training losses and evaluation metrics.
//!
//! Tensor losses take `(N, 3, H, W)` batches in `[0, 1]` and are
//! differentiable. The `eval_*` functions work on [`Image`]s in plain `f64`
//! and are used for reporting.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{kernels, ops};
use crate::teacher::{normalize_images, IMAGENET_MEAN, IMAGENET_STD};

pub const PSNR_CEILING: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const TEXT_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub perceptual: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub text: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 0.04,
            ssim: 0.1,
            psnr: 0.02,
            text: 0.08,
            distill: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.perceptual, self.ssim, self.psnr, self.text, self.distill];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Huber loss with transition point 1, mean-reduced.
pub fn smooth_l1(output: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = (output - target)?.abs()?;
    let q = d.clamp(0.0, 1.0)?;
    let per = ((q.sqr()? * 0.5)? + (d - q)?)?;
    Ok(per.mean_all()?)
}

/// Gaussian weights of length `k` with the given sigma, summing to one.
pub fn gaussian_window(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..k).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Window side used for an `h x w` image: 11, or the image side when smaller.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    SSIM_WINDOW.min(h).min(w)
}

/// `(n, n - k + 1)` matrix applying a valid 1-D correlation with `g`.
fn band_matrix(n: usize, g: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    let k = g.len();
    let m = n - k + 1;
    let mut v = vec![0f64; n * m];
    for j in 0..m {
        for (i, gi) in g.iter().enumerate() {
            v[(j + i) * m + j] = *gi;
        }
    }
    Ok(Tensor::from_vec(v, (n, m), device)?.to_dtype(dtype)?)
}

/// Separable valid-window blur of `(P, H, W)` planes. Returns `(P, Wo, Ho)`:
/// transposed, which is harmless because every use is elementwise.
fn blur_t(x: &Tensor, gh: &Tensor, gw: &Tensor) -> Result<Tensor> {
    let (p, h, w) = x.dims3()?;
    let wo = gw.dim(1)?;
    let rows = x.reshape((p * h, w))?.matmul(gw)?.reshape((p, h, wo))?;
    let ho = gh.dim(1)?;
    Ok(rows
        .transpose(1, 2)?
        .contiguous()?
        .reshape((p * wo, h))?
        .matmul(gh)?
        .reshape((p, wo, ho))?)
}

/// Per-image SSIM `(N,)` averaged over channels and window positions.
pub fn ssim_per_image(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = a.dims4()?;
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("ssim inputs differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let k = ssim_window_size(h, w);
    let g = gaussian_window(k, SSIM_SIGMA);
    let (dt, dev) = (a.dtype(), a.device());
    let gh = band_matrix(h, &g, dt, dev)?;
    let gw = band_matrix(w, &g, dt, dev)?;
    let x = a.reshape((n * c, h, w))?;
    let y = b.reshape((n * c, h, w))?;
    let mx = blur_t(&x, &gh, &gw)?;
    let my = blur_t(&y, &gh, &gw)?;
    let sxx = (blur_t(&x.sqr()?, &gh, &gw)? - mx.sqr()?)?;
    let syy = (blur_t(&y.sqr()?, &gh, &gw)? - my.sqr()?)?;
    let sxy = (blur_t(&(&x * &y)?, &gh, &gw)? - (&mx * &my)?)?;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let num = ((&mx * &my)?.affine(2.0, c1)? * sxy.affine(2.0, c2)?)?;
    let den = ((mx.sqr()? + my.sqr()?)?.affine(1.0, c1)? * (sxx + syy)?.affine(1.0, c2)?)?;
    let map = (num / den)?;
    let (_, wo, ho) = map.dims3()?;
    Ok(map.reshape((n, c * wo * ho))?.mean(D::Minus1)?)
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(ssim_per_image(a, b)?.mean_all()?)
}

pub fn ssim_loss(output: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(ssim(output, target)?.affine(-1.0, 1.0)?)
}

/// Per-image PSNR `(N,)` in dB for range-1 images, capped at 100 dB.
pub fn psnr_per_image(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.dim(0)?;
    let mse = (a - b)?.sqr()?.reshape((n, ()))?.mean(D::Minus1)?;
    let floor = 10f64.powf(-PSNR_CEILING / 10.0);
    let mse = mse.maximum(floor)?;
    Ok((mse.log()? * (-10.0 / std::f64::consts::LN_10))?)
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(psnr_per_image(a, b)?.mean_all()?)
}

pub fn psnr_loss(output: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(psnr(output, target)?.affine(-1.0 / PSNR_CEILING, 1.0)?)
}

/// `tau * cos(image_i, text_k)`, shape `(N, K)`.
pub fn cosine_logits(image: &Tensor, text: &Tensor, tau: f64) -> Result<Tensor> {
    let a = ops::l2_normalize(image, 1e-12)?;
    let b = ops::l2_normalize(text, 1e-12)?;
    Ok((a.matmul(&b.t()?)? * tau)?)
}

/// Cross-entropy of cosine logits against (soft) label rows, batch-averaged.
pub fn text_classification_loss(image: &Tensor, text: &Tensor, labels: &Tensor, tau: f64) -> Result<Tensor> {
    let logits = cosine_logits(image, text, tau)?;
    if logits.dims() != labels.dims() {
        return Err(Error::shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.dims(),
            logits.dims()
        )));
    }
    let logp = ops::log_softmax_last(&logits)?;
    Ok((labels.to_dtype(logp.dtype())? * logp)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

enum Layer {
    Conv { weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    Relu,
    MaxPool,
    /// Emit the current activation as a perceptual feature.
    Tap,
}

/// Frozen feature network for the perceptual loss.
pub struct PerceptualExtractor {
    layers: Vec<Layer>,
    normalize: bool,
    name: String,
}

pub const VGG16_FILE: &str = "vgg16_features.safetensors";

impl PerceptualExtractor {
    /// Random frozen three-tap network: conv-relu at full, half and quarter
    /// resolution.
    pub fn stub(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let widths = [(3, 8, 1), (8, 16, 2), (16, 32, 2)];
        for (cin, cout, stride) in widths {
            let fan = (cin * 9) as f64;
            let w: Vec<f32> = (0..cout * cin * 9)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * (2.0 / fan).sqrt()) as f32
                })
                .collect();
            layers.push(Layer::Conv {
                weight: Tensor::from_vec(w, (cout, cin, 3, 3), &Device::Cpu).expect("static shape"),
                bias: Tensor::zeros(cout, DType::F32, &Device::Cpu).expect("static shape"),
                stride,
                padding: 1,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::Tap);
        }
        Self { layers, normalize: false, name: format!("stub-{seed}") }
    }

    /// Two taps from explicit conv weights, for tests.
    pub fn from_convs(convs: Vec<(Tensor, Tensor, usize)>) -> Self {
        let mut layers = Vec::new();
        for (weight, bias, stride) in convs {
            layers.push(Layer::Conv { weight, bias, stride, padding: 1 });
            layers.push(Layer::Relu);
            layers.push(Layer::Tap);
        }
        Self { layers, normalize: false, name: "custom".into() }
    }

    /// VGG16 `features.*` weights up to relu3_3, tapping relu1_2, relu2_2
    /// and relu3_3.
    pub fn vgg16(path: &Path) -> Result<Self> {
        let map: HashMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)?;
        let get = |i: usize, what: &str| -> Result<Tensor> {
            map.get(&format!("features.{i}.{what}"))
                .cloned()
                .ok_or_else(|| Error::config(format!("{} lacks features.{i}.{what}", path.display())))
        };
        let mut layers = Vec::new();
        let plan: [&[usize]; 3] = [&[0, 2], &[5, 7], &[10, 12, 14]];
        for (block, convs) in plan.iter().enumerate() {
            if block > 0 {
                layers.push(Layer::MaxPool);
            }
            for &i in *convs {
                layers.push(Layer::Conv {
                    weight: get(i, "weight")?.to_dtype(DType::F32)?,
                    bias: get(i, "bias")?.to_dtype(DType::F32)?,
                    stride: 1,
                    padding: 1,
                });
                layers.push(Layer::Relu);
            }
            layers.push(Layer::Tap);
        }
        Ok(Self { layers, normalize: true, name: "vgg16".into() })
    }

    /// VGG16 from `dir` when present, otherwise the stub with a warning.
    pub fn from_dir_or_stub(dir: Option<&Path>, seed: u64) -> Self {
        if let Some(dir) = dir {
            let path = dir.join(VGG16_FILE);
            match Self::vgg16(&path) {
                Ok(e) => return e,
                Err(e) => log::warn!("perceptual extractor unavailable ({e}); using the random stub"),
            }
        }
        Self::stub(seed)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = if self.normalize {
            normalize_images(x, IMAGENET_MEAN, IMAGENET_STD)?
        } else {
            x.clone()
        };
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, stride, padding } => {
                    let w = weight.to_dtype(x.dtype())?.to_device(x.device())?;
                    let b = bias.to_dtype(x.dtype())?.to_device(x.device())?;
                    let c = b.dim(0)?;
                    x = kernels::conv2d(&x, &w, *stride, *padding)?.broadcast_add(&b.reshape((1, c, 1, 1))?)?;
                }
                Layer::Relu => x = x.relu()?,
                Layer::MaxPool => x = x.max_pool2d(2)?,
                Layer::Tap => out.push(x.clone()),
            }
        }
        Ok(out)
    }

    /// Sum over taps of the mean squared feature difference.
    pub fn loss(&self, output: &Tensor, target: &Tensor) -> Result<Tensor> {
        let fo = self.features(output)?;
        let ft = self.features(&target.detach())?;
        let mut total: Option<Tensor> = None;
        for (a, b) in fo.iter().zip(&ft) {
            let t = (a - b.detach())?.sqr()?.mean_all()?;
            total = Some(match total {
                Some(acc) => (acc + t)?,
                None => t,
            });
        }
        total.ok_or_else(|| Error::config("perceptual extractor has no taps"))
    }
}

/// Individual loss terms of one training step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub smooth_l1: Tensor,
    pub perceptual: Tensor,
    pub ssim: Tensor,
    pub psnr: Tensor,
    pub text: Tensor,
    pub distill: Option<Tensor>,
}

/// `L_s + sum_k lambda_k L_k`; the distillation term only when `distill_on`.
pub fn total_loss(terms: &LossTerms, w: &LossWeights, distill_on: bool) -> Result<Tensor> {
    let mut total = (&terms.smooth_l1
        + (terms.perceptual.affine(w.perceptual, 0.0)?
            + (terms.ssim.affine(w.ssim, 0.0)? + (terms.psnr.affine(w.psnr, 0.0)? + terms.text.affine(w.text, 0.0)?)?)?)?)?;
    if distill_on {
        if let Some(d) = &terms.distill {
            total = (total + d.affine(w.distill, 0.0)?)?;
        }
    }
    Ok(total)
}

/// PSNR in dB between two images, capped at 100.
pub fn eval_psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("psnr on {:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CEILING);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CEILING))
}

/// SSIM by direct windowed sums over every valid window position.
pub fn eval_ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("ssim on {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (h, w) = a.dims();
    let k = ssim_window_size(h, w);
    let g = gaussian_window(k, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i] * g[j];
                        let u = a.get(c, y0 + i, x0 + j) as f64;
                        let v = b.get(c, y0 + i, x0 + j) as f64;
                        mx += wt * u;
                        my += wt * v;
                        xx += wt * u * u;
                        yy += wt * v * v;
                        xy += wt * u * v;
                    }
                }
                let sx = xx - mx * mx;
                let sy = yy - my * my;
                let sxy = xy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
