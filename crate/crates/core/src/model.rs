//! Full restoration network: encoder, prior projector, prior-attention
//! bottleneck and decoder.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::cwp::{CwpModule, PriorProjector, ProjectedPrior};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{EncoderOutput, SarEncoder};
use crate::error::{Error, Result};
use crate::nn::Params;

pub struct ModelOutput {
    /// Restored image, `(N, 3, H, W)` in `[0, 1]`.
    pub output: Tensor,
    pub encoder: EncoderOutput,
    /// Projected teacher embedding; `None` when the global prior is off.
    pub prior: Option<ProjectedPrior>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    encoder: SarEncoder,
    projector: PriorProjector,
    cwp: CwpModule,
    decoder: Decoder,
}

impl Model {
    pub fn new(p: &Params, cfg: &ModelConfig, teacher_dim: usize) -> Result<Self> {
        let enc = &cfg.encoder;
        let c = *enc
            .channels
            .last()
            .ok_or_else(|| Error::config("encoder needs at least one stage"))?;
        cfg.cwp.validate(c)?;
        let encoder = SarEncoder::new(&p.pp("encoder"), enc)?;
        // Built even when unused so checkpoints keep one layout.
        let projector = PriorProjector::new(&p.pp("prior"), teacher_dim, c)?;
        let cwp = CwpModule::new(&p.pp("cwp"), c, &cfg.cwp)?;
        let dcfg = DecoderConfig {
            output: cfg.output,
            ..DecoderConfig::for_encoder(&enc.channels)
        };
        let decoder = Decoder::new(&p.pp("decoder"), &dcfg, &enc.channels, &enc.strides, c)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            projector,
            cwp,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &SarEncoder {
        &self.encoder
    }

    pub fn cwp(&self) -> &CwpModule {
        &self.cwp
    }

    pub fn required_multiple(&self) -> usize {
        self.cfg.encoder.required_multiple()
    }

    pub fn project(&self, embedding: &Tensor) -> Result<ProjectedPrior> {
        self.projector.forward(embedding)
    }

    /// `embedding` is the teacher's global embedding of `images`; it is
    /// ignored when the global prior is disabled.
    pub fn forward(&self, images: &Tensor, embedding: Option<&Tensor>) -> Result<ModelOutput> {
        let encoder = self.encoder.forward(images)?;
        let prior = match (self.cfg.global_prior, embedding) {
            (true, Some(e)) => Some(self.projector.forward(e)?),
            (true, None) => {
                return Err(Error::config("global prior enabled but no teacher embedding was given"))
            }
            (false, _) => None,
        };
        let theta_c = prior.as_ref().map(|p| &p.theta_c);
        let features = self.cwp.forward(&encoder.bottleneck, theta_c)?;
        let output = self.decoder.forward(&features, &encoder.skips, images)?;
        Ok(ModelOutput { output, encoder, prior })
    }
}
