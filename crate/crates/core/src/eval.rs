//! Evaluation, single-image inference and intermediate-map inspection.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{cosine_logits, eval_psnr, eval_ssim};
use crate::model::{Model, ModelOutput};
use crate::teacher::{FeatureCache, Teacher, WeatherClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Outputs are quantized to 8 bits before scoring, as a saved PNG would be.
    Comparison,
    /// Raw floating-point outputs are scored.
    Ablation,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "comparison" => Ok(Self::Comparison),
            "ablation" => Ok(Self::Ablation),
            other => Err(Error::config(format!("unknown eval mode `{other}` (expected comparison or ablation)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub class: String,
    pub degraded_psnr: f64,
    pub degraded_ssim: f64,
    pub restored_psnr: f64,
    pub restored_ssim: f64,
    /// Weather class whose text embedding is closest to the projected prior.
    pub predicted: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub count: usize,
    pub degraded_psnr: f64,
    pub degraded_ssim: f64,
    pub restored_psnr: f64,
    pub restored_ssim: f64,
}

impl MetricMeans {
    fn of<'a>(rows: impl Iterator<Item = &'a EvalRow>) -> Self {
        let mut m = Self::default();
        for r in rows {
            m.count += 1;
            m.degraded_psnr += r.degraded_psnr;
            m.degraded_ssim += r.degraded_ssim;
            m.restored_psnr += r.restored_psnr;
            m.restored_ssim += r.restored_ssim;
        }
        if m.count > 0 {
            let n = m.count as f64;
            m.degraded_psnr /= n;
            m.degraded_ssim /= n;
            m.restored_psnr /= n;
            m.restored_ssim /= n;
        }
        m
    }

    pub fn psnr_gain(&self) -> f64 {
        self.restored_psnr - self.degraded_psnr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: EvalMode,
    pub overall: MetricMeans,
    pub per_class: BTreeMap<String, MetricMeans>,
    /// Fraction of images whose predicted class matches the label argmax;
    /// `None` when the global prior is disabled.
    pub text_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "index",
            "class",
            "degraded_psnr",
            "degraded_ssim",
            "restored_psnr",
            "restored_ssim",
            "predicted",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.class.clone(),
                format!("{:.6}", r.degraded_psnr),
                format!("{:.6}", r.degraded_ssim),
                format!("{:.6}", r.restored_psnr),
                format!("{:.6}", r.restored_ssim),
                r.predicted.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }
}

/// A trained model with its prior teacher.
pub struct Restorer<'a> {
    model: &'a Model,
    teacher: &'a dyn Teacher,
    text: &'a Tensor,
    cache: Option<&'a FeatureCache>,
    device: Device,
}

pub struct Restored {
    pub image: Image,
    /// Index of the closest weather prompt.
    pub predicted: Option<usize>,
    pub output: ModelOutput,
}

impl<'a> Restorer<'a> {
    pub fn new(model: &'a Model, teacher: &'a dyn Teacher, text: &'a Tensor) -> Self {
        Self {
            model,
            teacher,
            text,
            cache: None,
            device: Device::Cpu,
        }
    }

    /// Look teacher embeddings up in `cache` before computing them.
    pub fn with_cache(mut self, cache: &'a FeatureCache) -> Self {
        self.cache = Some(cache);
        self
    }

    fn embedding(&self, x: &Tensor) -> Result<Tensor> {
        match self.cache {
            Some(c) => Ok(c.features(self.teacher, x)?.embedding),
            None => self.teacher.global_embedding(x),
        }
    }

    /// Restore an image of any size: replicate-pad to the model's input
    /// multiple, run, crop back.
    pub fn restore(&self, image: &Image) -> Result<Restored> {
        let (h, w) = image.dims();
        let m = self.model.required_multiple();
        let padded = image.pad_replicate(h.div_ceil(m) * m, w.div_ceil(m) * m)?;
        let x = padded.to_tensor(DType::F32, &self.device)?;
        let embedding = if self.model.config().global_prior {
            Some(self.embedding(&x)?)
        } else {
            None
        };
        let output = self.model.forward(&x, embedding.as_ref())?;
        let full = Image::from_tensor(&output.output)?;
        let predicted = match &output.prior {
            Some(p) => {
                let logits = cosine_logits(&p.hidden, self.text, 1.0)?.squeeze(0)?;
                Some(logits.argmax(0)?.to_scalar::<u32>()? as usize)
            }
            None => None,
        };
        Ok(Restored {
            image: full.crop(0, 0, h, w)?,
            predicted,
            output,
        })
    }

    pub fn evaluate(&self, samples: &[Sample], mode: EvalMode) -> Result<EvalReport> {
        if samples.is_empty() {
            return Err(Error::Dataset("no evaluation samples".into()));
        }
        let mut rows = Vec::with_capacity(samples.len());
        let mut correct = 0usize;
        for (index, s) in samples.iter().enumerate() {
            let r = self.restore(&s.weather)?;
            let restored = match mode {
                EvalMode::Comparison => r.image.quantized(),
                EvalMode::Ablation => r.image,
            };
            let label = s.label.argmax();
            if r.predicted == Some(label) {
                correct += 1;
            }
            rows.push(EvalRow {
                index,
                class: class_name(label),
                degraded_psnr: eval_psnr(&s.weather, &s.clean)?,
                degraded_ssim: eval_ssim(&s.weather, &s.clean)?,
                restored_psnr: eval_psnr(&restored, &s.clean)?,
                restored_ssim: eval_ssim(&restored, &s.clean)?,
                predicted: r.predicted.map(class_name),
            });
        }
        let mut per_class = BTreeMap::new();
        for name in rows.iter().map(|r| r.class.clone()).collect::<std::collections::BTreeSet<_>>() {
            per_class.insert(name.clone(), MetricMeans::of(rows.iter().filter(|r| r.class == name)));
        }
        let text_accuracy = self
            .model
            .config()
            .global_prior
            .then(|| correct as f64 / samples.len() as f64);
        let summary = EvalSummary {
            mode,
            overall: MetricMeans::of(rows.iter()),
            per_class,
            text_accuracy,
        };
        Ok(EvalReport { rows, summary })
    }

    /// Save mixing-weight maps and residual-magnitude heatmaps of every
    /// encoder block, upsampled to the input size. Returns the files written.
    pub fn inspect(&self, image: &Image, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(out_dir)?;
        let r = self.restore(image)?;
        let (h, w) = image.dims();
        let mut written = Vec::new();
        let mut save = |name: String, img: Image| -> Result<()> {
            let path = out_dir.join(name);
            img.crop(0, 0, h, w)?.save_png(&path)?;
            written.push(path);
            Ok(())
        };
        save("restored.png".into(), r.image.clone())?;
        let enc = &r.output.encoder;
        let (ph, pw) = r.output.output.dims4().map(|d| (d.2, d.3))?;
        for (s, maps) in enc.weights_maps.iter().enumerate() {
            for (b, m) in maps.iter().enumerate() {
                let m = m.upsample_nearest2d(ph, pw)?;
                for k in 0..m.dim(1)? {
                    save(format!("weights_s{s}_b{b}_k{k}.png"), gray(&m.narrow(1, k, 1)?, false)?)?;
                }
            }
        }
        for (s, res) in enc.residuals.iter().enumerate() {
            for (b, t) in res.iter().enumerate() {
                let mag = t.abs()?.mean_keepdim(1)?.upsample_nearest2d(ph, pw)?;
                save(format!("residual_s{s}_b{b}.png"), gray(&mag, true)?)?;
            }
        }
        Ok(written)
    }
}

/// `(1, 1, H, W)` map to a grey image; `normalize` rescales to `[0, 1]`.
fn gray(t: &Tensor, normalize: bool) -> Result<Image> {
    let (_, _, h, w) = t.dims4()?;
    let mut v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    if normalize {
        let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = (hi - lo).max(1e-12);
        v.iter_mut().for_each(|x| *x = (*x - lo) / span);
    }
    Ok(Image::from_fn(h, w, |y, x| {
        let g = v[y * w + x];
        [g, g, g]
    }))
}

fn class_name(i: usize) -> String {
    WeatherClass::from_index(i).map_or_else(|| format!("class{i}"), |c| c.name().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WeatherLabel;
    use crate::nn::ParamStore;
    use crate::teacher::{PromptSet, StubTeacher};

    fn setup(global_prior: bool) -> (ParamStore, Model, StubTeacher, Tensor) {
        let dev = Device::Cpu;
        let teacher = StubTeacher::vision_language(0, &dev).unwrap();
        let mut cfg = crate::config::Config::desk().model;
        cfg.encoder.blocks = vec![1, 1, 1, 1];
        cfg.cwp.num_blocks = 1;
        cfg.global_prior = global_prior;
        let store = ParamStore::trainable(0, DType::F32, &dev);
        let model = Model::new(&store.root(), &cfg, teacher.spec().embed_dim).unwrap();
        let text = teacher.text_embeddings(&PromptSet::weather()).unwrap();
        (store, model, teacher, text)
    }

    fn sample(h: usize, w: usize, seed: u64) -> Sample {
        let clean = crate::synth::scene(h, w, seed).quantized();
        let (weather, _) = crate::synth::synthesize(&clean, WeatherClass::Snow, seed).unwrap();
        Sample::new(weather, clean, WeatherLabel::one_hot(WeatherClass::Snow)).unwrap()
    }

    #[test]
    fn restore_pads_and_crops_any_size() {
        let (_s, model, teacher, text) = setup(true);
        let r = Restorer::new(&model, &teacher, &text);
        let out = r.restore(&sample(37, 50, 1).weather).unwrap();
        assert_eq!(out.image.dims(), (37, 50));
        assert!(out.predicted.unwrap() < 3);
    }

    #[test]
    fn report_rows_and_modes() {
        let (_s, model, teacher, text) = setup(true);
        let r = Restorer::new(&model, &teacher, &text);
        let samples = vec![sample(32, 32, 1), sample(32, 32, 2)];
        let cmp = r.evaluate(&samples, EvalMode::Comparison).unwrap();
        let abl = r.evaluate(&samples, EvalMode::Ablation).unwrap();
        assert_eq!(cmp.rows.len(), 2);
        assert!(cmp.summary.text_accuracy.is_some());
        assert_eq!(cmp.summary.per_class["snow"].count, 2);
        assert_eq!(cmp.rows[0].degraded_psnr, abl.rows[0].degraded_psnr);
        assert!((cmp.rows[0].restored_psnr - abl.rows[0].restored_psnr).abs() < 0.5);
        let expected = eval_psnr(&samples[0].weather, &samples[0].clean).unwrap();
        assert_eq!(cmp.rows[0].degraded_psnr, expected);

        let dir = tempfile::tempdir().unwrap();
        cmp.write_csv(&dir.path().join("m.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("index,class,degraded_psnr"));
    }

    #[test]
    fn no_text_accuracy_without_global_prior() {
        let (_s, model, teacher, text) = setup(false);
        let r = Restorer::new(&model, &teacher, &text);
        let rep = r.evaluate(&[sample(32, 32, 3)], EvalMode::Ablation).unwrap();
        assert_eq!(rep.summary.text_accuracy, None);
        assert_eq!(rep.rows[0].predicted, None);
    }

    #[test]
    fn inspect_writes_maps() {
        let (_s, model, teacher, text) = setup(true);
        let r = Restorer::new(&model, &teacher, &text);
        let dir = tempfile::tempdir().unwrap();
        let files = r.inspect(&sample(32, 32, 4).weather, dir.path()).unwrap();
        // restored + 4 stages x 1 block x (3 kernels + 1 residual)
        assert_eq!(files.len(), 1 + 4 * 4);
        assert!(files.iter().all(|f| f.exists()));
        let m = Image::load(dir.path().join("weights_s0_b0_k0.png")).unwrap();
        assert_eq!(m.dims(), (32, 32));
    }
}
