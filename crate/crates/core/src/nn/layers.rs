use candle_core::Tensor;

use super::{kernels, ops};
use super::params::{Init, Params};
use crate::error::{Error, Result};

/// Affine map over the last dimension: `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(p, in_dim, out_dim, true, Init::fan_in(in_dim), Init::fan_in(in_dim))
    }

    pub fn no_bias(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(p, in_dim, out_dim, false, Init::fan_in(in_dim), Init::Zeros)
    }

    pub fn with_init(
        p: &Params,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        let weight = p.get((out_dim, in_dim), "weight", weight_init)?;
        let bias = if bias {
            Some(p.get(out_dim, "bias", bias_init)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        if last != self.in_dim {
            return Err(Error::shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim, dims
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, last))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

/// Dense 2-D convolution with square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &Params,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        Self::with_init(
            p,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            true,
            Init::fan_in(fan_in),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        p: &Params,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        weight_init: Init,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = p.get((out_channels, in_channels, kernel, kernel), "weight", weight_init)?;
        let bias = if bias {
            Some(p.get(out_channels, "bias", Init::fan_in(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::config(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let y = kernels::conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get(dim, "weight", Init::Ones)?,
            beta: p.get(dim, "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

/// Per-channel 3x3 convolution with optional bias.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    kernel: Tensor,
    bias: Option<Tensor>,
    channels: usize,
}

impl DepthwiseConv {
    pub fn new(p: &Params, channels: usize, bias: bool) -> Result<Self> {
        let kernel = p.get((channels, 3, 3), "weight", Init::fan_in(9))?;
        let bias = if bias {
            Some(p.get(channels, "bias", Init::fan_in(9))?)
        } else {
            None
        };
        Ok(Self {
            kernel,
            bias,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::depthwise_conv3x3(x, &self.kernel)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.channels, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }
}

/// Two-layer perceptron with GELU: `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(p: &Params, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&p.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&ops::gelu(&self.fc1.forward(x)?)?)
    }
}
