//! Spatially-adaptive residual (SAR) encoder.
//!
//! A four-stage hierarchical Transformer. Each stage starts with a strided
//! convolution ("conv projection") that lowers resolution and widens channels,
//! followed by pre-norm blocks of efficient self-attention and a feed-forward
//! network whose hidden features pass through a depthwise conv plus a
//! spatially-adaptive dynamic depthwise conv. The dynamic branch output of
//! every block is kept as a residual feature for distillation.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{kernels, ops, Conv2d, DepthwiseConv, Init, LayerNorm, Linear, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    /// Key/value spatial reduction ratio of each stage's attention.
    pub reductions: Vec<usize>,
    /// Conv projection stride per stage.
    pub strides: Vec<usize>,
    /// Conv projection kernel size per stage.
    pub patch_sizes: Vec<usize>,
    /// Number of mixable depthwise kernels in the dynamic branch.
    pub num_kernels: usize,
    pub mlp_ratio: usize,
    /// Disable to drop the dynamic branch (plain depthwise FFN).
    pub use_sar: bool,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            in_channels: 3,
            channels: vec![32, 64, 128, 256],
            blocks: vec![3, 3, 3, 2],
            heads: vec![1, 2, 4, 8],
            reductions: vec![8, 4, 2, 1],
            strides: vec![4, 2, 2, 2],
            patch_sizes: vec![7, 3, 3, 3],
            num_kernels: 3,
            mlp_ratio: 4,
            use_sar: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
            blocks: vec![2, 2, 2, 1],
            ..Self::paper()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    /// Product of all projection strides: inputs must be a multiple of this.
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Cumulative stride at the output of each stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(1, |acc, s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    /// Minimal input multiple that also keeps every attention reduction exact.
    pub fn required_multiple(&self) -> usize {
        self.stage_strides()
            .iter()
            .zip(&self.reductions)
            .map(|(s, r)| s * r)
            .fold(self.total_stride(), lcm)
    }

    pub fn hidden_channels(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c * self.mlp_ratio).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.channels.len();
        if m == 0 {
            return Err(Error::config("encoder needs at least one stage"));
        }
        for (name, len) in [
            ("blocks", self.blocks.len()),
            ("heads", self.heads.len()),
            ("reductions", self.reductions.len()),
            ("strides", self.strides.len()),
            ("patch_sizes", self.patch_sizes.len()),
        ] {
            if len != m {
                return Err(Error::config(format!(
                    "encoder.{name} has {len} entries but there are {m} stages"
                )));
            }
        }
        if self.num_kernels == 0 {
            return Err(Error::config("encoder.num_kernels must be at least 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("encoder.mlp_ratio must be at least 1"));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("encoder.channels must be strictly increasing"));
        }
        for s in 0..m {
            if self.heads[s] == 0 || !self.channels[s].is_multiple_of(self.heads[s]) {
                return Err(Error::config(format!(
                    "stage {s}: {} channels not divisible by {} heads",
                    self.channels[s], self.heads[s]
                )));
            }
            if self.blocks[s] == 0 || self.reductions[s] == 0 || self.strides[s] == 0 {
                return Err(Error::config(format!(
                    "stage {s}: blocks, reduction and stride must be positive"
                )));
            }
            let k = self.patch_sizes[s];
            if k != self.strides[s] && k.is_multiple_of(2) {
                return Err(Error::config(format!(
                    "stage {s}: patch size {k} must be odd or equal to the stride"
                )));
            }
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Strided convolution + layer norm between stages.
#[derive(Clone, Debug)]
pub struct ConvProjection {
    conv: Conv2d,
    norm: LayerNorm,
}

impl ConvProjection {
    pub fn new(p: &Params, in_channels: usize, out_channels: usize, patch: usize, stride: usize) -> Result<Self> {
        let padding = if patch == stride { 0 } else { patch / 2 };
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), in_channels, out_channels, patch, stride, padding)?,
            norm: LayerNorm::new(&p.pp("norm"), out_channels)?,
        })
    }

    /// Returns normalized tokens `(N, h*w, C)` and the grid size.
    pub fn forward_tokens(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = self.conv.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        let tokens = self.norm.forward(&ops::map_to_tokens(&y)?)?;
        Ok((tokens, h, w))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t, h, w) = self.forward_tokens(x)?;
        ops::tokens_to_map(&t, h, w)
    }
}

/// Multi-head self-attention whose keys and values come from a grid reduced
/// by a strided convolution.
#[derive(Clone, Debug)]
pub struct EfficientSelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    reduction: usize,
    dim: usize,
}

impl EfficientSelfAttention {
    pub fn new(p: &Params, dim: usize, heads: usize, reduction: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        if reduction == 0 {
            return Err(Error::config("attention reduction must be positive"));
        }
        let reduce = if reduction > 1 {
            Some((
                Conv2d::new(&p.pp("sr"), dim, dim, reduction, reduction, 0)?,
                LayerNorm::new(&p.pp("sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&p.pp("q"), dim, dim)?,
            k: Linear::new(&p.pp("k"), dim, dim)?,
            v: Linear::new(&p.pp("v"), dim, dim)?,
            proj: Linear::new(&p.pp("proj"), dim, dim)?,
            reduce,
            heads,
            reduction,
            dim,
        })
    }

    pub fn key_value_len(&self, h: usize, w: usize) -> usize {
        (h / self.reduction) * (w / self.reduction)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        Ok(x
            .reshape((n, l, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Output tokens together with the `(N, heads, L, L_kv)` attention weights.
    pub fn forward_with_weights(&self, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let (n, l, c) = x.dims3()?;
        if c != self.dim || l != h * w {
            return Err(Error::shape(format!(
                "attention expects (N, {}, {}) tokens, got {:?}",
                h * w,
                self.dim,
                x.dims()
            )));
        }
        if !h.is_multiple_of(self.reduction) || !w.is_multiple_of(self.reduction) {
            return Err(Error::config(format!(
                "reduction ratio {} does not divide the {h}x{w} grid",
                self.reduction
            )));
        }
        let kv_src = match &self.reduce {
            Some((conv, norm)) => {
                let reduced = conv.forward(&ops::tokens_to_map(x, h, w)?)?;
                norm.forward(&ops::map_to_tokens(&reduced)?)?
            }
            None => x.clone(),
        };
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(&kv_src)?)?;
        let v = self.split_heads(&self.v.forward(&kv_src)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = ops::softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((n, l, c))?;
        Ok((self.proj.forward(&out)?, attn))
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, h, w)?.0)
    }
}

/// Predicts per-location mixing weights for the kernel bank:
/// depthwise 3x3 -> pointwise conv to `num_kernels` channels -> sigmoid.
#[derive(Clone, Debug)]
pub struct WeightsMapHead {
    dw: DepthwiseConv,
    pw: Conv2d,
    num_kernels: usize,
}

impl WeightsMapHead {
    pub fn new(p: &Params, channels: usize, num_kernels: usize) -> Result<Self> {
        Ok(Self {
            dw: DepthwiseConv::new(&p.pp("dw"), channels, true)?,
            pw: Conv2d::new(&p.pp("pw"), channels, num_kernels, 1, 1, 0)?,
            num_kernels,
        })
    }

    /// `(N, C, H, W)` -> `(N, num_kernels, H, W)` with entries in `(0, 1)`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        ops::sigmoid(&self.pw.forward(&self.dw.forward(features)?)?)
    }

    pub fn num_kernels(&self) -> usize {
        self.num_kernels
    }
}

/// `num_kernels` bias-free depthwise 3x3 kernels, stored `(K, C, 3, 3)`.
#[derive(Clone, Debug)]
pub struct KernelBank {
    kernels: Tensor,
}

impl KernelBank {
    pub fn new(p: &Params, channels: usize, num_kernels: usize) -> Result<Self> {
        Ok(Self {
            kernels: p.get((num_kernels, channels, 3, 3), "kernels", Init::fan_in(9))?,
        })
    }

    pub fn from_tensor(kernels: Tensor) -> Result<Self> {
        let (_, _, kh, kw) = kernels.dims4()?;
        if (kh, kw) != (3, 3) {
            return Err(Error::shape("kernel bank entries must be 3x3"));
        }
        Ok(Self { kernels })
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Depthwise convolution whose 3x3 kernel at each location `(x, y)` is the
/// weighted mix `sum_j w_j(x, y) * k_j` of the bank.
///
/// Shapes: `features (N, C, H, W)`, `bank (K, C, 3, 3)`, `weights (N, K, H, W)`.
/// Zero padding of one pixel keeps the spatial size; there is no bias.
pub fn spatially_adaptive_conv(features: &Tensor, bank: &KernelBank, weights: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = features.dims4()?;
    let (k, kc, _, _) = bank.kernels.dims4()?;
    let (wn, wk, wh, ww) = weights.dims4()?;
    if wk != k {
        return Err(Error::config(format!(
            "weights map has {wk} channels but the kernel bank has {k} kernels"
        )));
    }
    if kc != c {
        return Err(Error::shape(format!(
            "kernel bank has {kc} channels, features have {c}"
        )));
    }
    if (wn, wh, ww) != (n, h, w) {
        return Err(Error::shape(format!(
            "weights map {:?} does not match features {:?}",
            weights.dims(),
            features.dims()
        )));
    }
    kernels::spatially_adaptive3x3(features, &bank.kernels, weights)
}

/// The same mixing written as a composition of primitive tensor ops; used to
/// cross-check the fused kernel.
pub fn spatially_adaptive_conv_reference(features: &Tensor, bank: &KernelBank, weights: &Tensor) -> Result<Tensor> {
    let taps = ops::shifted_taps(features)?;
    let mut acc: Option<Tensor> = None;
    for j in 0..bank.len() {
        let kernel = bank.kernels.narrow(0, j, 1)?.squeeze(0)?;
        let response = ops::depthwise_from_taps(&taps, &kernel)?;
        let term = response.broadcast_mul(&weights.narrow(1, j, 1)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or_else(|| Error::config("kernel bank is empty"))
}

/// The dynamic branch: weights head plus kernel bank.
#[derive(Clone, Debug)]
pub struct SpatiallyAdaptiveResidual {
    head: WeightsMapHead,
    bank: KernelBank,
}

impl SpatiallyAdaptiveResidual {
    pub fn new(p: &Params, channels: usize, num_kernels: usize) -> Result<Self> {
        Ok(Self {
            head: WeightsMapHead::new(&p.pp("weights"), channels, num_kernels)?,
            bank: KernelBank::new(&p.pp("bank"), channels, num_kernels)?,
        })
    }

    /// Residual features and the weights map that produced them.
    pub fn forward(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let weights = self.head.forward(features)?;
        let residual = spatially_adaptive_conv(features, &self.bank, &weights)?;
        Ok((residual, weights))
    }

    pub fn head(&self) -> &WeightsMapHead {
        &self.head
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }
}

#[derive(Debug, Clone)]
pub struct FfnOutput {
    pub tokens: Tensor,
    /// Dynamic-branch output `(N, hidden, H, W)`; `None` when the branch is disabled.
    pub residual: Option<Tensor>,
    pub weights: Option<Tensor>,
}

/// Feed-forward network with a depthwise conv and the spatially-adaptive branch:
/// `Linear -> reshape -> (DW + SAR) -> GELU -> reshape -> Linear`.
#[derive(Clone, Debug)]
pub struct SarFfn {
    fc1: Linear,
    dw: DepthwiseConv,
    sar: Option<SpatiallyAdaptiveResidual>,
    fc2: Linear,
    hidden: usize,
}

impl SarFfn {
    pub fn new(p: &Params, dim: usize, hidden: usize, num_kernels: usize, use_sar: bool) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), dim, hidden)?,
            dw: DepthwiseConv::new(&p.pp("dw"), hidden, true)?,
            sar: if use_sar {
                Some(SpatiallyAdaptiveResidual::new(&p.pp("sar"), hidden, num_kernels)?)
            } else {
                None
            },
            fc2: Linear::new(&p.pp("fc2"), hidden, dim)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<FfnOutput> {
        let local = ops::tokens_to_map(&self.fc1.forward(x)?, h, w)?;
        let mut mixed = self.dw.forward(&local)?;
        let (residual, weights) = match &self.sar {
            Some(sar) => {
                let (r, wm) = sar.forward(&local)?;
                mixed = (mixed + &r)?;
                (Some(r), Some(wm))
            }
            None => (None, None),
        };
        let out = self.fc2.forward(&ops::map_to_tokens(&ops::gelu(&mixed)?)?)?;
        Ok(FfnOutput {
            tokens: out,
            residual,
            weights,
        })
    }
}

/// Pre-norm Transformer block: attention + skip, then SAR FFN + skip.
#[derive(Clone, Debug)]
pub struct SarBlock {
    norm1: LayerNorm,
    attn: EfficientSelfAttention,
    norm2: LayerNorm,
    ffn: SarFfn,
}

impl SarBlock {
    pub fn new(
        p: &Params,
        dim: usize,
        heads: usize,
        reduction: usize,
        mlp_ratio: usize,
        num_kernels: usize,
        use_sar: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&p.pp("norm1"), dim)?,
            attn: EfficientSelfAttention::new(&p.pp("attn"), dim, heads, reduction)?,
            norm2: LayerNorm::new(&p.pp("norm2"), dim)?,
            ffn: SarFfn::new(&p.pp("ffn"), dim, dim * mlp_ratio, num_kernels, use_sar)?,
        })
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<FfnOutput> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        let ffn = self.ffn.forward(&self.norm2.forward(&x)?, h, w)?;
        Ok(FfnOutput {
            tokens: (x + ffn.tokens)?,
            residual: ffn.residual,
            weights: ffn.weights,
        })
    }

    pub fn attention(&self) -> &EfficientSelfAttention {
        &self.attn
    }

    pub fn ffn(&self) -> &SarFfn {
        &self.ffn
    }
}

#[derive(Clone, Debug)]
struct Stage {
    proj: ConvProjection,
    blocks: Vec<SarBlock>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// One `(N, C_s, H_s, W_s)` map per stage, finest first.
    pub skips: Vec<Tensor>,
    /// Coarsest stage output, fed to the prior-embedding module.
    pub bottleneck: Tensor,
    /// `residuals[s][b]`: dynamic-branch output of block `b` in stage `s`.
    pub residuals: Vec<Vec<Tensor>>,
    /// Matching mixing-weight maps.
    pub weights_maps: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct SarEncoder {
    cfg: EncoderConfig,
    stages: Vec<Stage>,
}

impl SarEncoder {
    pub fn new(p: &Params, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.num_stages());
        let mut in_ch = cfg.in_channels;
        for s in 0..cfg.num_stages() {
            let sp = p.pp(format!("stage{s}"));
            let c = cfg.channels[s];
            let proj = ConvProjection::new(&sp.pp("proj"), in_ch, c, cfg.patch_sizes[s], cfg.strides[s])?;
            let blocks = (0..cfg.blocks[s])
                .map(|b| {
                    SarBlock::new(
                        &sp.pp(format!("block{b}")),
                        c,
                        cfg.heads[s],
                        cfg.reductions[s],
                        cfg.mlp_ratio,
                        cfg.num_kernels,
                        cfg.use_sar,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                proj,
                blocks,
                norm: LayerNorm::new(&sp.pp("norm"), c)?,
            });
            in_ch = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn block(&self, stage: usize, block: usize) -> Option<&SarBlock> {
        self.stages.get(stage).and_then(|s| s.blocks.get(block))
    }

    pub fn projection(&self, stage: usize) -> Option<&ConvProjection> {
        self.stages.get(stage).map(|s| &s.proj)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let multiple = self.cfg.required_multiple();
        if !h.is_multiple_of(multiple) || !w.is_multiple_of(multiple) || h == 0 || w == 0 {
            return Err(Error::InputSize {
                height: h,
                width: w,
                multiple,
            });
        }
        Ok(())
    }

    /// `(N, 3, H, W)` image batch to multi-scale features.
    pub fn forward(&self, image: &Tensor) -> Result<EncoderOutput> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::config(format!(
                "encoder expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        self.check_input(h, w)?;
        let mut x = image.clone();
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut residuals = Vec::with_capacity(self.stages.len());
        let mut weights_maps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (mut tokens, gh, gw) = stage.proj.forward_tokens(&x)?;
            let mut stage_res = Vec::with_capacity(stage.blocks.len());
            let mut stage_w = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let out = block.forward(&tokens, gh, gw)?;
                tokens = out.tokens;
                if let Some(r) = out.residual {
                    stage_res.push(r);
                }
                if let Some(wm) = out.weights {
                    stage_w.push(wm);
                }
            }
            x = ops::tokens_to_map(&stage.norm.forward(&tokens)?, gh, gw)?;
            skips.push(x.clone());
            residuals.push(stage_res);
            weights_maps.push(stage_w);
        }
        Ok(EncoderOutput {
            bottleneck: x,
            skips,
            residuals,
            weights_maps,
        })
    }
}

/// Softmax rows of an attention tensor must each sum to one; returns the
/// largest deviation.
pub fn max_row_sum_deviation(attn: &Tensor) -> Result<f64> {
    let sums = attn
        .to_dtype(candle_core::DType::F64)?
        .sum(D::Minus1)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok(sums.iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs())))
}
