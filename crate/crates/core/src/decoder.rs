//! Convolutional decoder.
//!
//! Up-stage `k` concatenates the running features with the encoder skip of
//! matching resolution (coarsest first), applies two 3x3 conv + GELU layers
//! and upsamples (nearest) by the stride that produced that skip. A final
//! head sees the upsampled features together with the degraded input and
//! produces the image according to [`OutputMode`].

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Params};

/// How the head's channels become the restored image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// `sigmoid(y)`.
    #[default]
    Direct,
    /// `clamp(input + y, 0, 1)`.
    Residual,
    /// `g * input + (1 - g) * sigmoid(y)` with a fourth gate channel `g = sigmoid(y_3)`.
    Gated,
}

impl OutputMode {
    fn head_channels(self) -> usize {
        match self {
            OutputMode::Gated => 4,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output channels of each up-stage, coarsest first.
    pub channels: Vec<usize>,
    pub output: OutputMode,
}

impl DecoderConfig {
    /// Mirror of the encoder widths.
    pub fn for_encoder(encoder_channels: &[usize]) -> Self {
        Self {
            channels: encoder_channels.iter().rev().copied().collect(),
            output: OutputMode::Direct,
        }
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    conv1: Conv2d,
    conv2: Conv2d,
    factor: usize,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    stages: Vec<UpStage>,
    head1: Conv2d,
    head2: Conv2d,
    skip_channels: Vec<usize>,
    output: OutputMode,
}

impl Decoder {
    /// `skip_channels` and `strides` describe the encoder, finest stage first.
    pub fn new(p: &Params, cfg: &DecoderConfig, skip_channels: &[usize], strides: &[usize], bottleneck_channels: usize) -> Result<Self> {
        let m = skip_channels.len();
        if cfg.channels.len() != m || strides.len() != m || m == 0 {
            return Err(Error::config(format!(
                "decoder has {} up-stages but the encoder has {m} skips",
                cfg.channels.len()
            )));
        }
        let mut stages = Vec::with_capacity(m);
        let mut in_ch = bottleneck_channels;
        for k in 0..m {
            let skip = skip_channels[m - 1 - k];
            let out = cfg.channels[k];
            let sp = p.pp(format!("up{k}"));
            stages.push(UpStage {
                conv1: Conv2d::new(&sp.pp("conv1"), in_ch + skip, out, 3, 1, 1)?,
                conv2: Conv2d::new(&sp.pp("conv2"), out, out, 3, 1, 1)?,
                factor: strides[m - 1 - k],
            });
            in_ch = out;
        }
        let last = cfg.channels[m - 1];
        Ok(Self {
            stages,
            head1: Conv2d::new(&p.pp("head1"), last + 3, last, 3, 1, 1)?,
            head2: Conv2d::new(&p.pp("head2"), last, cfg.output.head_channels(), 3, 1, 1)?,
            skip_channels: skip_channels.to_vec(),
            output: cfg.output,
        })
    }

    /// `features`: prior-module output at the bottleneck resolution;
    /// `skips`: encoder maps, finest first; `input`: the degraded image.
    pub fn forward(&self, features: &Tensor, skips: &[Tensor], input: &Tensor) -> Result<Tensor> {
        let m = self.stages.len();
        if skips.len() != m {
            return Err(Error::config(format!(
                "decoder expects {m} skips, got {}",
                skips.len()
            )));
        }
        let mut x = features.clone();
        for (k, stage) in self.stages.iter().enumerate() {
            let skip = &skips[m - 1 - k];
            let (_, sc, sh, sw) = skip.dims4()?;
            let (_, _, xh, xw) = x.dims4()?;
            if sc != self.skip_channels[m - 1 - k] || (sh, sw) != (xh, xw) {
                return Err(Error::config(format!(
                    "skip {} has shape {:?}, expected {} channels at {xh}x{xw}",
                    m - 1 - k,
                    skip.dims(),
                    self.skip_channels[m - 1 - k]
                )));
            }
            let h = ops::gelu(&stage.conv1.forward(&Tensor::cat(&[&x, skip], 1)?)?)?;
            let h = ops::gelu(&stage.conv2.forward(&h)?)?;
            x = h.upsample_nearest2d(xh * stage.factor, xw * stage.factor)?;
        }
        let (_, _, ih, iw) = input.dims4()?;
        let (_, _, xh, xw) = x.dims4()?;
        if (ih, iw) != (xh, xw) {
            return Err(Error::config(format!(
                "decoder output {xh}x{xw} does not match input {ih}x{iw}"
            )));
        }
        let h = ops::gelu(&self.head1.forward(&Tensor::cat(&[&x, input], 1)?)?)?;
        let out = self.head2.forward(&h)?;
        match self.output {
            OutputMode::Direct => ops::sigmoid(&out),
            OutputMode::Residual => Ok((input + out)?.clamp(0.0, 1.0)?),
            OutputMode::Gated => {
                let direct = ops::sigmoid(&out.narrow(1, 0, 3)?)?;
                let gate = ops::sigmoid(&out.narrow(1, 3, 1)?)?;
                let keep = input.broadcast_mul(&gate)?;
                Ok((keep + direct.broadcast_mul(&gate.affine(-1.0, 1.0)?)?)?)
            }
        }
    }
}
