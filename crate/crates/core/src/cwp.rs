//! Weather-prior embedding at the bottleneck.
//!
//! Each block holds its own learnable prior tokens `theta_l (L, C)` and a
//! scalar fusion weight `w_c` (initialised to zero). A per-sample global prior
//! `theta_c`, projected from the teacher's image embedding, is added to every
//! prior token as `theta_l + w_c * theta_c`; the fused tokens supply keys and
//! values for cross attention from the image tokens.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ops, Init, LayerNorm, Linear, Mlp, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwpConfig {
    pub num_blocks: usize,
    pub heads: usize,
    /// Number of learnable prior tokens per block.
    pub num_tokens: usize,
    pub mlp_ratio: usize,
}

impl CwpConfig {
    pub fn paper() -> Self {
        Self {
            num_blocks: 3,
            heads: 8,
            num_tokens: 48,
            mlp_ratio: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            num_tokens: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.num_tokens == 0 {
            return Err(Error::config("cwp.num_tokens must be at least 1"));
        }
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "cwp: {channels} channels not divisible by {} heads",
                self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("cwp.mlp_ratio must be at least 1"));
        }
        Ok(())
    }
}

/// Two linear layers mapping the teacher's global embedding to a channel
/// vector of the bottleneck width.
#[derive(Clone, Debug)]
pub struct PriorProjector {
    fc1: Linear,
    fc2: Linear,
    teacher_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ProjectedPrior {
    /// Output of the first linear layer, in the teacher embedding space;
    /// compared against the text embeddings by the classification loss.
    pub hidden: Tensor,
    /// `theta_c`, shape `(N, C)`.
    pub theta_c: Tensor,
}

impl PriorProjector {
    pub fn new(p: &Params, teacher_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), teacher_dim, teacher_dim)?,
            fc2: Linear::new(&p.pp("fc2"), teacher_dim, channels)?,
            teacher_dim,
        })
    }

    /// `(N, teacher_dim)` -> `(N, C)`.
    pub fn forward(&self, embedding: &Tensor) -> Result<ProjectedPrior> {
        let d = embedding.dims().last().copied().unwrap_or(0);
        if d != self.teacher_dim {
            return Err(Error::config(format!(
                "teacher embedding has dimension {d}, projector expects {}",
                self.teacher_dim
            )));
        }
        let hidden = self.fc1.forward(embedding)?;
        let theta_c = self.fc2.forward(&ops::gelu(&hidden)?)?;
        Ok(ProjectedPrior { hidden, theta_c })
    }
}

/// `theta_l + w_c * theta_c` broadcast to `(N, L, C)`.
///
/// `theta_l: (L, C)`, `theta_c: (N, C)` or `None`, `w_c: (1,)`.
/// Without a global prior the tokens are repeated over `batch` samples.
pub fn fuse_priors(theta_l: &Tensor, theta_c: Option<&Tensor>, w_c: &Tensor, batch: usize) -> Result<Tensor> {
    let (l, c) = theta_l.dims2()?;
    match theta_c {
        Some(tc) => {
            let (n, tcc) = tc.dims2()?;
            if tcc != c {
                return Err(Error::shape(format!(
                    "global prior has {tcc} channels, prior tokens have {c}"
                )));
            }
            let scaled = tc.broadcast_mul(w_c)?.reshape((n, 1, c))?;
            Ok(theta_l.unsqueeze(0)?.broadcast_add(&scaled)?)
        }
        None => Ok(theta_l.unsqueeze(0)?.broadcast_as((batch, l, c))?.contiguous()?),
    }
}

/// Multi-head cross attention: queries from image tokens, keys/values from
/// fused prior tokens.
#[derive(Clone, Debug)]
pub struct CwpCrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
}

impl CwpCrossAttention {
    pub fn new(p: &Params, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "cross attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&p.pp("q"), dim, dim)?,
            k: Linear::new(&p.pp("k"), dim, dim)?,
            v: Linear::new(&p.pp("v"), dim, dim)?,
            proj: Linear::new(&p.pp("proj"), dim, dim)?,
            heads,
            dim,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        Ok(x.reshape((n, l, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Keys and values from fused prior tokens `(N, L, C)`.
    pub fn keys_values(&self, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.k.forward(fused)?, self.v.forward(fused)?))
    }

    /// Returns the output tokens and the `(N, heads, Lx, L)` attention weights.
    pub fn forward_with_weights(&self, x: &Tensor, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, lx, c) = x.dims3()?;
        let (fnb, _, fc) = fused.dims3()?;
        if c != self.dim || fc != self.dim || fnb != n {
            return Err(Error::shape(format!(
                "cross attention got tokens {:?} and priors {:?}",
                x.dims(),
                fused.dims()
            )));
        }
        let (k, v) = self.keys_values(fused)?;
        let q = self.split(&self.q.forward(x)?)?;
        let (k, v) = (self.split(&k)?, self.split(&v)?);
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let attn = ops::softmax_last(&(q.matmul(&k.t()?.contiguous()?)? * scale)?)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((n, lx, c))?;
        Ok((self.proj.forward(&out)?, attn))
    }

    pub fn forward(&self, x: &Tensor, fused: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, fused)?.0)
    }
}

/// Pre-norm block: prior cross attention + skip, then a plain MLP + skip.
#[derive(Clone, Debug)]
pub struct CwpBlock {
    theta_l: Tensor,
    w_c: Tensor,
    norm1: LayerNorm,
    attn: CwpCrossAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl CwpBlock {
    pub fn new(p: &Params, dim: usize, cfg: &CwpConfig) -> Result<Self> {
        Ok(Self {
            theta_l: p.get((cfg.num_tokens, dim), "prior_tokens", Init::Normal { std: 0.02 })?,
            w_c: p.get(1, "prior_weight", Init::Zeros)?,
            norm1: LayerNorm::new(&p.pp("norm1"), dim)?,
            attn: CwpCrossAttention::new(&p.pp("attn"), dim, cfg.heads)?,
            norm2: LayerNorm::new(&p.pp("norm2"), dim)?,
            mlp: Mlp::new(&p.pp("mlp"), dim, dim * cfg.mlp_ratio)?,
        })
    }

    pub fn prior_tokens(&self) -> &Tensor {
        &self.theta_l
    }

    pub fn prior_weight(&self) -> &Tensor {
        &self.w_c
    }

    pub fn attention(&self) -> &CwpCrossAttention {
        &self.attn
    }

    pub fn forward(&self, x: &Tensor, theta_c: Option<&Tensor>) -> Result<Tensor> {
        let n = x.dim(0)?;
        let fused = fuse_priors(&self.theta_l, theta_c, &self.w_c, n)?;
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, &fused)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct CwpModule {
    blocks: Vec<CwpBlock>,
}

impl CwpModule {
    pub fn new(p: &Params, channels: usize, cfg: &CwpConfig) -> Result<Self> {
        cfg.validate(channels)?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| CwpBlock::new(&p.pp(format!("block{i}")), channels, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[CwpBlock] {
        &self.blocks
    }

    /// `(N, C, H, W)` bottleneck map in and out.
    pub fn forward(&self, bottleneck: &Tensor, theta_c: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, w) = bottleneck.dims4()?;
        let mut x = ops::map_to_tokens(bottleneck)?;
        for block in &self.blocks {
            x = block.forward(&x, theta_c)?;
        }
        ops::tokens_to_map(&x, h, w)
    }
}
