//! Manifests, paired crops, Cut-Mix and batching.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::derive_seed;
use crate::teacher::WeatherClass;

pub const NUM_CLASSES: usize = 3;

/// Probability vector over [`WeatherClass::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherLabel(pub [f64; NUM_CLASSES]);

impl WeatherLabel {
    pub fn one_hot(class: WeatherClass) -> Self {
        let mut v = [0.0; NUM_CLASSES];
        v[class.index()] = 1.0;
        Self(v)
    }

    /// `(1 - alpha) * self + alpha * other`.
    pub fn mix(&self, other: &Self, alpha: f64) -> Self {
        let mut v = [0.0; NUM_CLASSES];
        for (k, out) in v.iter_mut().enumerate() {
            *out = (1.0 - alpha) * self.0[k] + alpha * other.0[k];
        }
        Self(v)
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if self.0[k] > self.0[best] {
                best = k;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|p| !(0.0..=1.0).contains(p)) || (self.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Dataset(format!("label {:?} is not a probability vector", self.0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative to the manifest directory, or absolute.
    pub clean_path: String,
    pub weather_path: String,
    pub class: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_digest: Option<String>,
    /// Soft label overriding the one-hot label of `class`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<[f64; NUM_CLASSES]>,
}

impl ManifestRecord {
    pub fn weather_class(&self) -> Result<WeatherClass> {
        WeatherClass::parse(&self.class)
    }

    pub fn weather_label(&self) -> Result<WeatherLabel> {
        let label = match self.label {
            Some(v) => WeatherLabel(v),
            None => WeatherLabel::one_hot(self.weather_class()?),
        };
        label.validate()?;
        Ok(label)
    }
}

/// Line-delimited JSON list of paired images.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: PathBuf, records: Vec<ManifestRecord>) -> Self {
        Self { root, records }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Dataset(format!("cannot open manifest {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
            rec.weather_label()?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Dataset(format!("manifest {} is empty", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let r = &self.records[i];
        let weather = Image::load(self.resolve(&r.weather_path))?;
        let clean = Image::load(self.resolve(&r.clean_path))?;
        Sample::new(weather, clean, r.weather_label()?)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub weather: Image,
    pub clean: Image,
    pub label: WeatherLabel,
}

impl Sample {
    pub fn new(weather: Image, clean: Image, label: WeatherLabel) -> Result<Self> {
        if weather.dims() != clean.dims() {
            return Err(Error::Dataset(format!(
                "weather image {:?} and clean image {:?} differ in size",
                weather.dims(),
                clean.dims()
            )));
        }
        Ok(Self { weather, clean, label })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Per-sample Cut-Mix probability.
    pub mix_prob: f64,
    pub crop: usize,
    /// Range of the pasted area fraction.
    pub min_area: f64,
    pub max_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mix_prob: 0.7,
            crop: 256,
            min_area: 0.1,
            max_area: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_prob) {
            return Err(Error::config(format!("mix_prob {} outside [0, 1]", self.mix_prob)));
        }
        if self.crop == 0 {
            return Err(Error::config("crop must be positive"));
        }
        if !(0.0 <= self.min_area && self.min_area <= self.max_area && self.max_area <= 1.0) {
            return Err(Error::config("need 0 <= min_area <= max_area <= 1"));
        }
        Ok(())
    }
}

/// Same random `size x size` window cut from both images.
pub fn paired_random_crop(weather: &Image, clean: &Image, size: usize, rng: &mut ChaCha8Rng) -> Result<(Image, Image)> {
    let (h, w) = weather.dims();
    if clean.dims() != (h, w) {
        return Err(Error::Dataset("paired images differ in size".into()));
    }
    if h < size || w < size {
        return Err(Error::Dataset(format!("image {h}x{w} is smaller than the {size}x{size} crop")));
    }
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    Ok((weather.crop(y, x, size, size)?, clean.crop(y, x, size, size)?))
}

/// Axis-aligned paste region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Box with uniformly drawn centre and area fraction in `[min_area, max_area]`,
/// clipped to the image.
pub fn sample_box(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> CutBox {
    let frac = rng.random_range(cfg.min_area..=cfg.max_area);
    let side = frac.sqrt();
    let bh = ((h as f64 * side).round() as usize).clamp(1, h);
    let bw = ((w as f64 * side).round() as usize).clamp(1, w);
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let y0 = cy.saturating_sub(bh / 2);
    let x0 = cx.saturating_sub(bw / 2);
    let y1 = (y0 + bh).min(h);
    let x1 = (x0 + bw).min(w);
    CutBox { y: y0, x: x0, h: y1 - y0, w: x1 - x0 }
}

/// Paste `b[box]` into `a` in both images; label weights follow the pasted
/// pixel fraction.
pub fn cutmix_with_box(a: &Sample, b: &Sample, bx: CutBox) -> Result<Sample> {
    let (h, w) = a.weather.dims();
    if b.weather.dims() != (h, w) {
        return Err(Error::Dataset("cut-mix samples differ in size".into()));
    }
    if bx.y + bx.h > h || bx.x + bx.w > w {
        return Err(Error::Dataset(format!("cut box {bx:?} exceeds {h}x{w}")));
    }
    let paste = |dst: &Image, src: &Image| {
        let mut out = dst.clone();
        for c in 0..3 {
            for y in bx.y..bx.y + bx.h {
                for x in bx.x..bx.x + bx.w {
                    out.set(c, y, x, src.get(c, y, x));
                }
            }
        }
        out
    };
    let alpha = bx.area() as f64 / (h * w) as f64;
    Ok(Sample {
        weather: paste(&a.weather, &b.weather),
        clean: paste(&a.clean, &b.clean),
        label: a.label.mix(&b.label, alpha),
    })
}

pub fn cutmix(a: &Sample, b: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<(Sample, CutBox)> {
    let (h, w) = a.weather.dims();
    let bx = sample_box(h, w, cfg, rng);
    Ok((cutmix_with_box(a, b, bx)?, bx))
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub weather: Tensor,
    pub clean: Tensor,
    /// `(N, 3)` label rows.
    pub labels: Tensor,
    pub samples: Vec<Sample>,
    pub mixed: Vec<bool>,
}

impl Batch {
    pub fn from_samples(samples: Vec<Sample>, mixed: Vec<bool>, dtype: DType, device: &Device) -> Result<Self> {
        let weather: Vec<Image> = samples.iter().map(|s| s.weather.clone()).collect();
        let clean: Vec<Image> = samples.iter().map(|s| s.clean.clone()).collect();
        let labels: Vec<f64> = samples.iter().flat_map(|s| s.label.0).collect();
        Ok(Self {
            weather: Image::batch_to_tensor(&weather, dtype, device)?,
            clean: Image::batch_to_tensor(&clean, dtype, device)?,
            labels: Tensor::from_vec(labels, (samples.len(), NUM_CLASSES), device)?.to_dtype(dtype)?,
            samples,
            mixed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Deterministic batch producer over an in-memory dataset. Batch order and
/// contents depend only on `(samples, seed, epoch)`.
pub struct Loader {
    samples: Vec<Sample>,
    batch_size: usize,
    cfg: AugmentConfig,
    seed: u64,
}

impl Loader {
    pub fn new(samples: Vec<Sample>, batch_size: usize, cfg: AugmentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        Ok(Self { samples, batch_size, cfg, seed })
    }

    pub fn from_manifest(manifest: &Manifest, batch_size: usize, cfg: AugmentConfig, seed: u64) -> Result<Self> {
        Self::new(manifest.load_all()?, batch_size, cfg, seed)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// Augmented samples of `epoch`, grouped into batches; the last batch
    /// may be partial. Cut-Mix pairs element `i` with element `i + 1`
    /// (cyclically) of the same batch.
    pub fn epoch_samples(&self, epoch: usize) -> Result<Vec<(Vec<Sample>, Vec<bool>)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0xda7a, epoch as u64));
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.batch_size) {
            let crops = chunk
                .iter()
                .map(|&i| {
                    let s = &self.samples[i];
                    let (w, c) = paired_random_crop(&s.weather, &s.clean, self.cfg.crop, &mut rng)?;
                    Sample::new(w, c, s.label)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut batch = Vec::with_capacity(crops.len());
            let mut mixed = Vec::with_capacity(crops.len());
            for i in 0..crops.len() {
                if rng.random_bool(self.cfg.mix_prob) {
                    let partner = &crops[(i + 1) % crops.len()];
                    batch.push(cutmix(&crops[i], partner, &self.cfg, &mut rng)?.0);
                    mixed.push(true);
                } else {
                    batch.push(crops[i].clone());
                    mixed.push(false);
                }
            }
            out.push((batch, mixed));
        }
        Ok(out)
    }

    pub fn epoch(&self, epoch: usize, dtype: DType, device: &Device) -> Result<Vec<Batch>> {
        self.epoch_samples(epoch)?
            .into_iter()
            .map(|(s, m)| Batch::from_samples(s, m, dtype, device))
            .collect()
    }
}
