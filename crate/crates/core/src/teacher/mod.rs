//! Frozen teacher encoders.
//!
//! A teacher supplies multi-scale stage features (distillation targets), a
//! global image embedding (weather prior) and text embeddings for the weather
//! prompts. Implementations never record gradients.

mod cache;
mod clip;
mod stub;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{FeatureCache, TeacherFeatures, CACHE_DIR_ENV};
pub use clip::{ClipTeacher, CLIP_RESNET_FILE, CLIP_TEXT_FILE, CLIP_VIT_FILE};
pub use stub::StubTeacher;

pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// The three weather classes, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeatherClass {
    Snow,
    Raindrop,
    RainHaze,
}

impl WeatherClass {
    pub const ALL: [WeatherClass; 3] = [WeatherClass::Snow, WeatherClass::Raindrop, WeatherClass::RainHaze];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            WeatherClass::Snow => "snow",
            WeatherClass::Raindrop => "raindrop",
            WeatherClass::RainHaze => "rain-haze",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown weather class `{s}`")))
    }

    /// The phrase substituted into the prompt template.
    pub fn phrase(self) -> &'static str {
        match self {
            WeatherClass::Snow => "snow",
            WeatherClass::Raindrop => "raindrops",
            WeatherClass::RainHaze => "heavy rain and haze",
        }
    }
}

/// One prompt per weather class, built from the template `An image with XXX`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub prompts: Vec<String>,
}

impl PromptSet {
    pub const TEMPLATE: &'static str = "An image with XXX";

    pub fn weather() -> Self {
        Self {
            prompts: WeatherClass::ALL
                .iter()
                .map(|c| Self::TEMPLATE.replace("XXX", c.phrase()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub name: String,
    /// Indices (0-based) of the teacher stages used for distillation.
    pub stage_indices: Vec<usize>,
    /// Channels of each *selected* stage.
    pub stage_channels: Vec<usize>,
    /// Cumulative stride of each selected stage relative to the teacher input.
    pub stage_strides: Vec<usize>,
    pub embed_dim: usize,
    /// Fixed square input resolution, or `None` to run at the native size.
    pub input_size: Option<usize>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

pub trait Teacher: Send + Sync {
    fn spec(&self) -> &TeacherSpec;

    /// Selected stage features for an `(N, 3, H, W)` batch in `[0, 1]`.
    fn stage_features(&self, images: &Tensor) -> Result<Vec<Tensor>>;

    /// `(N, embed_dim)` global embeddings.
    fn global_embedding(&self, images: &Tensor) -> Result<Tensor>;

    /// `(num_prompts, embed_dim)` unit-norm rows.
    fn text_embeddings(&self, prompts: &PromptSet) -> Result<Tensor>;

    /// Digest of all teacher weights; unchanged by training.
    fn digest(&self) -> Result<[u8; 32]>;

    fn name(&self) -> &str {
        &self.spec().name
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    /// Seeded random vision-language stand-in.
    StubVl,
    /// Seeded random image-classification stand-in (no text tower; class
    /// prototypes stand in for text embeddings).
    StubClassifier,
    /// CLIP weights loaded from disk.
    Pretrained,
}

impl TeacherKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stub-vl" => Ok(TeacherKind::StubVl),
            "stub-classifier" => Ok(TeacherKind::StubClassifier),
            "pretrained" => Ok(TeacherKind::Pretrained),
            other => Err(Error::config(format!(
                "unknown teacher kind `{other}` (expected stub-vl, stub-classifier or pretrained)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TeacherKind::StubVl => "stub-vl",
            TeacherKind::StubClassifier => "stub-classifier",
            TeacherKind::Pretrained => "pretrained",
        }
    }
}

/// Build a teacher. `weights_dir` is only read for [`TeacherKind::Pretrained`].
pub fn load_teacher(kind: TeacherKind, seed: u64, weights_dir: Option<PathBuf>, device: &Device) -> Result<Box<dyn Teacher>> {
    match kind {
        TeacherKind::StubVl => Ok(Box::new(StubTeacher::vision_language(seed, device)?)),
        TeacherKind::StubClassifier => Ok(Box::new(StubTeacher::classifier(seed, device)?)),
        TeacherKind::Pretrained => {
            let dir = weights_dir.ok_or_else(|| Error::TeacherLoad {
                name: "clip".into(),
                dir: PathBuf::from("<unset>"),
                reason: "set `teacher.weights_dir` to a directory containing the converted CLIP weights".into(),
            })?;
            Ok(Box::new(ClipTeacher::load(&dir, device)?))
        }
    }
}

/// Normalise `[0, 1]` images with per-channel mean/std.
pub fn normalize_images(images: &Tensor, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
    let dev = images.device();
    let dt = images.dtype();
    let m = Tensor::new(&mean, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
    let s = Tensor::new(&std, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
    Ok(images.broadcast_sub(&m)?.broadcast_div(&s)?)
}

/// Channel ranges of parameter-free adaptive average pooling from `src` to
/// `dst` channels: output `i` averages `[floor(i*src/dst), ceil((i+1)*src/dst))`.
pub fn adaptive_pool_ranges(src: usize, dst: usize) -> Vec<(usize, usize)> {
    (0..dst)
        .map(|i| ((i * src) / dst, ((i + 1) * src).div_ceil(dst)))
        .collect()
}

/// Adaptive average pooling over the channel axis of an `(N, C, H, W)` map.
/// Differentiable; identity when `C == target`.
pub fn channel_match(feature: &Tensor, target: usize) -> Result<Tensor> {
    let (n, c, h, w) = feature.dims4()?;
    if c == 0 || target == 0 {
        return Err(Error::shape("channel_match needs at least one channel"));
    }
    if c == target {
        return Ok(feature.clone());
    }
    let mut m = vec![0f64; target * c];
    for (i, (a, b)) in adaptive_pool_ranges(c, target).into_iter().enumerate() {
        let inv = 1.0 / (b - a) as f64;
        for j in a..b {
            m[i * c + j] = inv;
        }
    }
    let pool = Tensor::from_vec(m, (1, target, c), feature.device())?
        .to_dtype(feature.dtype())?
        .broadcast_as((n, target, c))?
        .contiguous()?;
    Ok(pool
        .matmul(&feature.reshape((n, c, h * w))?)?
        .reshape((n, target, h, w))?)
}

/// Source sample positions and weights for one axis of a bilinear resize with
/// half-pixel centres (`align_corners = false`).
fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of an `(N, C, H, W)` map. Not differentiable: used on the
/// frozen teacher side only.
pub fn resize_match(feature: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = feature.dims4()?;
    if (h, w) == (target_h, target_w) {
        return Ok(feature.clone());
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    let src = feature.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let ys = bilinear_axis(h, target_h);
    let xs = bilinear_axis(w, target_w);
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    for plane in src.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_vec(out, (n, c, target_h, target_w), feature.device())?.to_dtype(feature.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_follow_template() {
        let p = PromptSet::weather();
        assert_eq!(p.len(), 3);
        assert_eq!(p.prompts[0], "An image with snow");
        assert!(p.prompts.iter().all(|s| s.starts_with("An image with ")));
    }

    #[test]
    fn class_names_roundtrip() {
        for c in WeatherClass::ALL {
            assert_eq!(WeatherClass::parse(c.name()).unwrap(), c);
            assert_eq!(WeatherClass::from_index(c.index()), Some(c));
        }
    }

    #[test]
    fn channel_match_identity_and_pairs() {
        let x = Tensor::arange(0f64, 8.0 * 2.0, &Device::Cpu).unwrap().reshape((1, 8, 1, 2)).unwrap();
        let same = channel_match(&x, 8).unwrap();
        assert_eq!(same.flatten_all().unwrap().to_vec1::<f64>().unwrap(), x.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let y = channel_match(&x, 4).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // Channel i holds values (2i, 2i+1); pairs (2k, 2k+1) average elementwise.
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for k in 0..4 {
            for p in 0..2 {
                let expected = (xv[(2 * k) * 2 + p] + xv[(2 * k + 1) * 2 + p]) / 2.0;
                assert!((y[k * 2 + p] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_match_keeps_constants() {
        let x = (Tensor::ones((2, 7, 3, 3), DType::F64, &Device::Cpu).unwrap() * 0.37).unwrap();
        let y = channel_match(&x, 3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|v| (v - 0.37).abs() < 1e-12));
        let up = channel_match(&x, 10).unwrap();
        assert_eq!(up.dims(), &[2, 10, 3, 3]);
    }

    #[test]
    fn pool_ranges_cover_all_channels() {
        for (s, d) in [(7, 3), (3, 7), (2048, 64), (5, 5)] {
            let r = adaptive_pool_ranges(s, d);
            assert_eq!(r.first().unwrap().0, 0);
            assert_eq!(r.last().unwrap().1, s);
            assert!(r.iter().all(|(a, b)| b > a));
        }
    }

    #[test]
    fn resize_identity_and_oracle() {
        let x = Tensor::rand(0f64, 1.0, (1, 2, 4, 5), &Device::Cpu).unwrap();
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(flat(&resize_match(&x, 4, 5).unwrap()), flat(&x));
        let up = flat(&resize_match(&x, 8, 10).unwrap());
        let xv0 = flat(&x);
        assert_eq!(up[0], xv0[0]);
        assert_eq!(up[79], xv0[19]);
        let y = resize_match(&x, 7, 3).unwrap();
        assert_eq!(y.dims(), &[1, 2, 7, 3]);

        // Independent per-output formula with explicit clamping.
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = |c: usize, r: isize, q: isize| {
            let r = r.clamp(0, 3) as usize;
            let q = q.clamp(0, 4) as usize;
            xv[(c * 4 + r) * 5 + q]
        };
        for c in 0..2 {
            for i in 0..7 {
                for j in 0..3 {
                    let sy = ((i as f64 + 0.5) * 4.0 / 7.0 - 0.5).max(0.0);
                    let sx = ((j as f64 + 0.5) * 5.0 / 3.0 - 0.5).max(0.0);
                    let (y0, x0) = (sy.floor() as isize, sx.floor() as isize);
                    let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
                    let v = at(c, y0, x0) * (1.0 - dy) * (1.0 - dx)
                        + at(c, y0, x0 + 1) * (1.0 - dy) * dx
                        + at(c, y0 + 1, x0) * dy * (1.0 - dx)
                        + at(c, y0 + 1, x0 + 1) * dy * dx;
                    assert!((yv[(c * 7 + i) * 3 + j] - v).abs() < 1e-12);
                }
            }
        }
        // Downsampling by an exact factor of two averages 2x2 blocks.
        let z = resize_match(&x, 2, 5).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((z[0] - (xv[0] + xv[5]) / 2.0).abs() < 1e-12);
    }
}
