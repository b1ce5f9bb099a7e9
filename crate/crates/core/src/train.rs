//! Training loop and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{Batch, Loader, Manifest, Sample};
use crate::distill::distill_loss;
use crate::error::{Error, Result};
use crate::losses::{
    psnr_loss, smooth_l1, ssim_loss, text_classification_loss, total_loss, LossTerms, PerceptualExtractor,
    TEXT_TEMPERATURE,
};
use crate::model::Model;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::teacher::{load_teacher, PromptSet, Teacher};

const CHECKPOINT_META_KEY: &str = "allweather";
const CHECKPOINT_FORMAT: u32 = 1;

/// Scalar value of every loss term of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub smooth_l1: f64,
    pub perceptual: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub text: f64,
    pub distill: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn of(terms: &LossTerms, total: &Tensor) -> Result<Self> {
        Ok(Self {
            smooth_l1: scalar(&terms.smooth_l1)?,
            perceptual: scalar(&terms.perceptual)?,
            ssim: scalar(&terms.ssim)?,
            psnr: scalar(&terms.psnr)?,
            text: scalar(&terms.text)?,
            distill: terms.distill.as_ref().map(scalar).transpose()?,
            total: scalar(total)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.smooth_l1, self.perceptual, self.ssim, self.psnr, self.text, self.total]
            .iter()
            .chain(self.distill.iter())
            .all(|v| v.is_finite())
    }

    /// `Err(Numeric)` listing every term when any of them is not finite.
    pub fn check_finite(&self, epoch: usize, step: u64) -> Result<()> {
        if self.is_finite() {
            return Ok(());
        }
        Err(Error::Numeric(format!(
            "non-finite loss at epoch {epoch}, step {step}: smooth_l1={} perceptual={} ssim={} psnr={} text={} distill={} total={}",
            self.smooth_l1,
            self.perceptual,
            self.ssim,
            self.psnr,
            self.text,
            self.distill.map_or("off".to_string(), |d| d.to_string()),
            self.total
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub distill_active: bool,
}

/// Prior and distillation teachers; shared when both name the same kind.
pub fn load_teachers(cfg: &Config, device: &Device) -> Result<(Arc<dyn Teacher>, Arc<dyn Teacher>)> {
    let t = &cfg.teacher;
    let prior: Arc<dyn Teacher> = Arc::from(load_teacher(t.prior_kind()?, t.seed, t.weights_dir.clone(), device)?);
    let distill = if t.distill_kind()? == t.prior_kind()? {
        prior.clone()
    } else {
        Arc::from(load_teacher(t.distill_kind()?, t.seed, t.weights_dir.clone(), device)?)
    };
    Ok((prior, distill))
}

pub struct Trainer {
    cfg: Config,
    device: Device,
    store: ParamStore,
    model: Model,
    adam: Adam,
    prior_teacher: Arc<dyn Teacher>,
    distill_teacher: Arc<dyn Teacher>,
    text: Tensor,
    perceptual: PerceptualExtractor,
    loader: Loader,
    next_epoch: usize,
    history: Vec<StepRecord>,
    output_dir: Option<PathBuf>,
    warned_no_residuals: bool,
}

impl Trainer {
    /// Trainer over in-memory samples; nothing is written to disk until an
    /// output directory is set.
    pub fn new(cfg: Config, samples: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let (prior_teacher, distill_teacher) = load_teachers(&cfg, &device)?;
        let enc_stages = cfg.model.encoder.num_stages();
        let teacher_stages = distill_teacher.spec().stage_channels.len();
        if teacher_stages != enc_stages {
            return Err(Error::config(format!(
                "distillation teacher `{}` provides {teacher_stages} stages but the encoder has {enc_stages}",
                distill_teacher.name()
            )));
        }
        let store = ParamStore::trainable(cfg.seed, DType::F32, &device);
        let model = Model::new(&store.root(), &cfg.model, prior_teacher.spec().embed_dim)?;
        let adam = Adam::new(
            store.vars(),
            AdamConfig {
                lr: cfg.lr_at(0),
                beta1: cfg.train.beta1,
                beta2: cfg.train.beta2,
                eps: 1e-8,
            },
        );
        let text = prior_teacher.text_embeddings(&PromptSet::weather())?.to_dtype(DType::F32)?;
        let perceptual = PerceptualExtractor::from_dir_or_stub(cfg.loss.perceptual_dir.as_deref(), cfg.seed ^ 0x9e37);
        let loader = Loader::new(samples, cfg.train.batch_size, cfg.augment.clone(), cfg.seed)?;
        log::info!(
            "model: {} parameters; prior teacher {}, distillation teacher {}, perceptual {}",
            store.num_elements(),
            prior_teacher.name(),
            distill_teacher.name(),
            perceptual.name()
        );
        Ok(Self {
            cfg,
            device,
            store,
            model,
            adam,
            prior_teacher,
            distill_teacher,
            text,
            perceptual,
            loader,
            next_epoch: 0,
            history: Vec::new(),
            output_dir: None,
            warned_no_residuals: false,
        })
    }

    /// Trainer over `data.train_manifest`, writing to `output_dir`.
    pub fn from_config(cfg: Config) -> Result<Self> {
        let path = cfg
            .data
            .train_manifest
            .clone()
            .ok_or_else(|| Error::config("data.train_manifest is not set"))?;
        let samples = Manifest::load(&path)?.load_all()?;
        let out = cfg.output_dir.clone();
        let mut t = Self::new(cfg, samples)?;
        t.set_output_dir(Some(out));
        Ok(t)
    }

    pub fn set_output_dir(&mut self, dir: Option<PathBuf>) {
        self.output_dir = dir;
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prior_teacher(&self) -> &dyn Teacher {
        self.prior_teacher.as_ref()
    }

    pub fn text_embeddings(&self) -> &Tensor {
        &self.text
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn distill_enabled(&self, epoch: usize) -> bool {
        self.cfg.distill.active(epoch) && self.cfg.loss.weights.distill > 0.0
    }

    /// Forward pass and every loss term for one batch.
    pub fn loss_terms(&mut self, batch: &Batch, epoch: usize) -> Result<(LossTerms, bool)> {
        let embedding = if self.cfg.model.global_prior {
            Some(self.prior_teacher.global_embedding(&batch.weather)?.detach())
        } else {
            None
        };
        let out = self.model.forward(&batch.weather, embedding.as_ref())?;
        let (y, t) = (&out.output, &batch.clean);
        let text = match &out.prior {
            Some(p) => text_classification_loss(&p.hidden, &self.text, &batch.labels, TEXT_TEMPERATURE)?,
            None => Tensor::zeros((), DType::F32, &self.device)?,
        };
        let mut distill_on = self.distill_enabled(epoch);
        if distill_on && out.encoder.residuals.iter().any(|r| r.is_empty()) {
            if !self.warned_no_residuals {
                log::warn!("encoder has no dynamic residuals; distillation term disabled");
                self.warned_no_residuals = true;
            }
            distill_on = false;
        }
        let distill = if distill_on {
            let clean = self.distill_teacher.stage_features(&batch.clean)?;
            let weather = self.distill_teacher.stage_features(&batch.weather)?;
            Some(distill_loss(&out.encoder.residuals, &clean, &weather, &self.cfg.distill)?)
        } else {
            None
        };
        let terms = LossTerms {
            smooth_l1: smooth_l1(y, t)?,
            perceptual: self.perceptual.loss(y, t)?,
            ssim: ssim_loss(y, t)?,
            psnr: psnr_loss(y, t)?,
            text,
            distill,
        };
        Ok((terms, distill_on))
    }

    /// One optimisation step.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<LossBreakdown> {
        let (terms, distill_on) = self.loss_terms(batch, epoch)?;
        let total = total_loss(&terms, &self.cfg.loss.weights, distill_on)?;
        let breakdown = LossBreakdown::of(&terms, &total)?;
        breakdown.check_finite(epoch, self.adam.step_count() + 1)?;
        self.adam.backward_step(&total)?;
        Ok(breakdown)
    }

    pub fn train_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.next_epoch;
        let lr = self.cfg.lr_at(epoch);
        self.adam.set_lr(lr);
        let batches = self.loader.epoch(epoch, DType::F32, &self.device)?;
        let mut sum = 0.0;
        for batch in &batches {
            let loss = self.step(batch, epoch)?;
            sum += loss.total;
            let rec = StepRecord {
                epoch,
                step: self.adam.step_count(),
                lr,
                loss,
            };
            if rec.step.is_multiple_of(self.cfg.train.log_every.max(1) as u64) {
                log::info!(
                    "epoch {epoch} step {} total {:.5} l1 {:.5} perc {:.5} ssim {:.5} psnr {:.5} text {:.5} distill {}",
                    rec.step,
                    loss.total,
                    loss.smooth_l1,
                    loss.perceptual,
                    loss.ssim,
                    loss.psnr,
                    loss.text,
                    loss.distill.map_or("off".into(), |d| format!("{d:.5}"))
                );
            }
            self.append_log(&rec)?;
            self.history.push(rec);
        }
        self.next_epoch += 1;
        Ok(EpochSummary {
            epoch,
            steps: batches.len(),
            lr,
            mean_total: sum / batches.len().max(1) as f64,
            distill_active: self.distill_enabled(epoch),
        })
    }

    /// Train up to `train.epochs`, checkpointing on the configured cadence and
    /// after the last epoch.
    pub fn run(&mut self) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while self.next_epoch < self.cfg.train.epochs {
            let s = self.train_epoch()?;
            log::info!("epoch {} done: mean loss {:.5}, lr {:.2e}", s.epoch, s.mean_total, s.lr);
            let done = self.next_epoch;
            if let Some(dir) = &self.output_dir {
                let every = self.cfg.train.checkpoint_every.max(1);
                if done.is_multiple_of(every) || done == self.cfg.train.epochs {
                    let ckpt = dir.join("checkpoints");
                    std::fs::create_dir_all(&ckpt)?;
                    let path = ckpt.join(format!("epoch_{done:04}.safetensors"));
                    self.save_checkpoint(&path)?;
                    std::fs::copy(&path, ckpt.join("latest.safetensors"))?;
                }
            }
            out.push(s);
        }
        Ok(out)
    }

    fn append_log(&self, rec: &StepRecord) -> Result<()> {
        let Some(dir) = &self.output_dir else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT,
            epochs_completed: self.next_epoch,
            step: self.adam.step_count(),
            config_digest: self.cfg.digest()?,
            config: self.cfg.to_toml()?,
            teacher_dim: self.prior_teacher.spec().embed_dim,
        };
        let mut tensors = BTreeMap::new();
        for (k, t) in self.store.tensors() {
            tensors.insert(format!("model.{k}"), t);
        }
        for (k, t) in self.adam.state_tensors() {
            tensors.insert(format!("adam.{k}"), t);
        }
        write_checkpoint(path, &tensors, &meta)
    }

    /// Continue from a checkpoint written by [`Trainer::save_checkpoint`].
    /// The model section of the configuration must match.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::load(path, &self.device)?;
        if ckpt.config.model != self.cfg.model {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        if ckpt.meta.config_digest != self.cfg.digest()? {
            log::warn!("resuming with a configuration that differs from the checkpoint's");
        }
        self.store.load(&ckpt.model, true)?;
        self.adam.load_state(ckpt.meta.step, &ckpt.optimizer)?;
        self.next_epoch = ckpt.meta.epochs_completed;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub epochs_completed: usize,
    pub step: u64,
    pub config_digest: String,
    /// Full configuration as TOML.
    pub config: String,
    pub teacher_dim: usize,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config: Config,
    pub model: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn write_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: &CheckpointMeta) -> Result<()> {
    let info = HashMap::from([(CHECKPOINT_META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info), &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{} is not a safetensors file: {e}", path.display())))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(CHECKPOINT_META_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{} has no training metadata", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(raw)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format)));
        }
        let config = Config::from_toml_str(&meta.config)?;
        let mut model = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (k, t) in candle_core::safetensors::load_buffer(&bytes, device)? {
            if let Some(name) = k.strip_prefix("model.") {
                model.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("adam.") {
                optimizer.insert(name.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{k}` in checkpoint")));
            }
        }
        Ok(Self { meta, config, model, optimizer })
    }

    /// Rebuild the trained network.
    pub fn build_model(&self, device: &Device) -> Result<(ParamStore, Model)> {
        let store = ParamStore::trainable(self.config.seed, DType::F32, device);
        let model = Model::new(&store.root(), &self.config.model, self.meta.teacher_dim)?;
        store.load(&self.model, true)?;
        Ok((store, model))
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
