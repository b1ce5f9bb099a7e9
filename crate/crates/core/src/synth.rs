//! Procedural weather degradations and synthetic dataset generation.
//!
//! Each generator samples its parameters from a seeded RNG and then applies
//! the compositing model of its weather type pointwise:
//!
//! * raindrop: `I_w = (1 - M) * I_c + R`
//! * heavy rain with haze: `I_w = T * (I_c + sum_i R_i) + (1 - T) * A`
//! * snow: `I_w = (1 - M) * I_c + M * S`
//!
//! Outputs are clipped to `[0, 1]`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Manifest, ManifestRecord, Sample, WeatherLabel};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::teacher::WeatherClass;

/// A single-channel `H x W` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn check(&self, h: usize, w: usize, what: &str) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(Error::shape(format!(
                "{what} is {}x{}, image is {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaindropParams {
    pub mask: Plane,
    pub residual: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeavyRainParams {
    pub transmission: Plane,
    pub streaks: Vec<Image>,
    pub airlight: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnowParams {
    pub mask: Plane,
    pub flakes: Image,
}

fn check_dims(clean: &Image, other: &Image, what: &str) -> Result<()> {
    if clean.dims() != other.dims() {
        return Err(Error::shape(format!(
            "{what} is {:?}, image is {:?}",
            other.dims(),
            clean.dims()
        )));
    }
    Ok(())
}

pub fn apply_raindrop(clean: &Image, p: &RaindropParams) -> Result<Image> {
    let (h, w) = clean.dims();
    p.mask.check(h, w, "raindrop mask")?;
    check_dims(clean, &p.residual, "raindrop residual")?;
    let plane = h * w;
    let data = clean
        .data()
        .iter()
        .zip(p.residual.data())
        .enumerate()
        .map(|(i, (c, r))| {
            let m = p.mask.data[i % plane] as f64;
            ((1.0 - m) * *c as f64 + *r as f64).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(h, w, data)
}

pub fn apply_heavy_rain(clean: &Image, p: &HeavyRainParams) -> Result<Image> {
    let (h, w) = clean.dims();
    p.transmission.check(h, w, "transmission map")?;
    for s in &p.streaks {
        check_dims(clean, s, "streak layer")?;
    }
    let plane = h * w;
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let t = p.transmission.data[i % plane] as f64;
            let a = p.airlight[i / plane] as f64;
            let rain: f64 = p.streaks.iter().map(|s| s.data()[i] as f64).sum();
            (t * (*c as f64 + rain) + (1.0 - t) * a).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(h, w, data)
}

pub fn apply_snow(clean: &Image, p: &SnowParams) -> Result<Image> {
    let (h, w) = clean.dims();
    p.mask.check(h, w, "snow mask")?;
    check_dims(clean, &p.flakes, "flake map")?;
    let plane = h * w;
    let data = clean
        .data()
        .iter()
        .zip(p.flakes.data())
        .enumerate()
        .map(|(i, (c, s))| {
            let m = p.mask.data[i % plane] as f64;
            ((1.0 - m) * *c as f64 + m * *s as f64).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(h, w, data)
}

/// Separable Gaussian blur with clamped borders.
fn blur_plane(src: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    let k: Vec<f32> = k.into_iter().map(|v| v / s).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn blur_image(img: &Image, sigma: f32) -> Image {
    let (h, w) = img.dims();
    let data: Vec<f32> = img.data().chunks(h * w).flat_map(|p| blur_plane(p, h, w, sigma)).collect();
    Image::new(h, w, data).expect("same dims")
}

fn scale(h: usize, w: usize) -> f32 {
    h.min(w) as f32 / 96.0
}

/// Smooth random field in `[0, 1]`: bilinear upsampling of a coarse grid.
fn smooth_field(h: usize, w: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let g = cells + 1;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 / (h.max(2) - 1) as f32 * cells as f32;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f32;
        for x in 0..w {
            let fx = x as f32 / (w.max(2) - 1) as f32 * cells as f32;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f32;
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

pub fn sample_raindrop(clean: &Image, rng: &mut ChaCha8Rng) -> RaindropParams {
    let (h, w) = clean.dims();
    let s = scale(h, w);
    let mut mask = vec![0f32; h * w];
    let drops = rng.random_range(6..=14);
    for _ in 0..drops {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let ry = rng.random_range(3.0..9.0) * s;
        let rx = ry * rng.random_range(0.7..1.3);
        let edge = 0.3;
        let y0 = (cy - ry - 1.0).max(0.0) as usize;
        let y1 = ((cy + ry + 1.0) as usize).min(h - 1);
        let x0 = (cx - rx - 1.0).max(0.0) as usize;
        let x1 = ((cx + rx + 1.0) as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                let d = (dy * dy + dx * dx).sqrt();
                let m = ((1.0 - d) / edge).clamp(0.0, 1.0);
                let i = y * w + x;
                mask[i] = mask[i].max(m);
            }
        }
    }
    // Drops act as lenses: they show a defocused, brightened view of the scene.
    let content = blur_image(clean, 2.5 * s);
    let gain = rng.random_range(1.0..1.15);
    let lift = rng.random_range(0.04..0.12);
    let plane = h * w;
    let residual: Vec<f32> = content
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let m = mask[i % plane];
            if m == 0.0 {
                0.0
            } else {
                m * (v * gain + lift).min(1.0)
            }
        })
        .collect();
    RaindropParams {
        mask: Plane { height: h, width: w, data: mask },
        residual: Image::new(h, w, residual).expect("same dims"),
    }
}

pub fn sample_heavy_rain(clean: &Image, rng: &mut ChaCha8Rng) -> HeavyRainParams {
    let (h, w) = clean.dims();
    let s = scale(h, w);
    let lo = rng.random_range(0.35..0.55);
    let hi = rng.random_range(0.7..0.9);
    let transmission: Vec<f32> = smooth_field(h, w, 3, rng).into_iter().map(|v| lo + (hi - lo) * v).collect();
    let base = rng.random_range(0.7..0.95);
    let airlight = if rng.random_bool(0.3) {
        [0, 1, 2].map(|_| (base + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0))
    } else {
        [base; 3]
    };
    let angle = rng.random_range(-0.4..0.4f32);
    let layers = 2;
    let streaks = (0..layers)
        .map(|_| {
            let a = angle + rng.random_range(-0.08..0.08f32);
            let len = (rng.random_range(7.0..15.0) * s).max(2.0);
            let density = rng.random_range(0.01..0.025);
            let strength = rng.random_range(0.25..0.5);
            let mut seeds = vec![0f32; h * w];
            for v in seeds.iter_mut() {
                if rng.random_bool(density) {
                    *v = rng.random_range(0.5..1.0);
                }
            }
            // Motion blur along the streak direction.
            let (dy, dx) = (a.cos(), a.sin());
            let steps = len.round() as i32;
            let mut layer = vec![0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = seeds[y * w + x];
                    if v == 0.0 {
                        continue;
                    }
                    for t in 0..steps {
                        let yy = (y as f32 + dy * t as f32).round() as isize;
                        let xx = (x as f32 + dx * t as f32).round() as isize;
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            let i = yy as usize * w + xx as usize;
                            layer[i] = (layer[i] + v * strength).min(1.0);
                        }
                    }
                }
            }
            let layer = blur_plane(&layer, h, w, 0.5);
            let data: Vec<f32> = (0..3).flat_map(|_| layer.iter().copied()).collect();
            Image::new(h, w, data).expect("same dims")
        })
        .collect();
    HeavyRainParams {
        transmission: Plane { height: h, width: w, data: transmission },
        streaks,
        airlight,
    }
}

pub fn sample_snow(clean: &Image, rng: &mut ChaCha8Rng) -> SnowParams {
    let (h, w) = clean.dims();
    let s = scale(h, w);
    let area = (h * w) as f32 / (96.0 * 96.0);
    let count = (rng.random_range(50.0..130.0) * area).round() as usize;
    let mut keep = vec![1f32; h * w];
    for _ in 0..count {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let sigma = rng.random_range(0.6..2.2) * s;
        let alpha = rng.random_range(0.6..1.0f32);
        let r = (3.0 * sigma).ceil() as isize;
        for y in (cy as isize - r).max(0)..=(cy as isize + r).min(h as isize - 1) {
            for x in (cx as isize - r).max(0)..=(cx as isize + r).min(w as isize - 1) {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                let g = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                keep[y as usize * w + x as usize] *= 1.0 - alpha * g;
            }
        }
    }
    let mask: Vec<f32> = keep.into_iter().map(|k| (1.0 - k).clamp(0.0, 1.0)).collect();
    let white = rng.random_range(0.9..1.0f32);
    let tint = rng.random_range(0.0..0.04f32);
    let color = [white - tint, white - tint / 2.0, white];
    let flakes = Image::from_fn(h, w, |_, _| color);
    SnowParams {
        mask: Plane { height: h, width: w, data: mask },
        flakes,
    }
}

/// Degrade `clean` with weather `class`; deterministic in `(clean, class, seed)`.
pub fn synthesize(clean: &Image, class: WeatherClass, seed: u64) -> Result<(Image, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Sha256::new();
    let out = match class {
        WeatherClass::Raindrop => {
            let p = sample_raindrop(clean, &mut rng);
            hash_floats(&mut h, &p.mask.data);
            hash_floats(&mut h, p.residual.data());
            apply_raindrop(clean, &p)?
        }
        WeatherClass::RainHaze => {
            let p = sample_heavy_rain(clean, &mut rng);
            hash_floats(&mut h, &p.transmission.data);
            for s in &p.streaks {
                hash_floats(&mut h, s.data());
            }
            hash_floats(&mut h, &p.airlight);
            apply_heavy_rain(clean, &p)?
        }
        WeatherClass::Snow => {
            let p = sample_snow(clean, &mut rng);
            hash_floats(&mut h, &p.mask.data);
            hash_floats(&mut h, p.flakes.data());
            apply_snow(clean, &p)?
        }
    };
    Ok((out, hex(&h.finalize())[..16].to_string()))
}

fn hash_floats(h: &mut Sha256, v: &[f32]) {
    for x in v {
        h.update(x.to_le_bytes());
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Procedural clean scene: a colour gradient, soft-edged shapes and
/// sinusoidal texture.
pub fn scene(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let c0 = color();
    let c1 = color();
    let mut shapes = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let theta = rng.random_range(0.0..std::f32::consts::TAU);
    let n_shapes = rng.random_range(3..=7);
    for _ in 0..n_shapes {
        let rect = rng.random_bool(0.5);
        let cy = rng.random_range(0.0..height as f32);
        let cx = rng.random_range(0.0..width as f32);
        let ry = rng.random_range(0.08..0.3) * height as f32;
        let rx = rng.random_range(0.08..0.3) * width as f32;
        let col = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let freq = rng.random_range(0.05..0.6f32);
        let amp = rng.random_range(0.0..0.15f32);
        let dir = rng.random_range(0.0..std::f32::consts::TAU);
        shapes.push((rect, cy, cx, ry, rx, col, freq, amp, dir));
    }
    let (st, ct) = theta.sin_cos();
    Image::from_fn(height, width, |y, x| {
        let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
        let t = (((xf / width as f32 - 0.5) * ct + (yf / height as f32 - 0.5) * st) + 0.5).clamp(0.0, 1.0);
        let mut px = [0f32; 3];
        for c in 0..3 {
            px[c] = c0[c] * (1.0 - t) + c1[c] * t;
        }
        for &(rect, cy, cx, ry, rx, col, freq, amp, dir) in &shapes {
            let dy = (yf - cy) / ry;
            let dx = (xf - cx) / rx;
            let d = if rect { dy.abs().max(dx.abs()) } else { (dy * dy + dx * dx).sqrt() };
            let cover = ((1.0 - d) * ry.min(rx)).clamp(0.0, 1.0);
            if cover > 0.0 {
                let wave = amp * ((xf * dir.cos() + yf * dir.sin()) * freq).sin();
                for c in 0..3 {
                    let v = (col[c] + wave).clamp(0.0, 1.0);
                    px[c] = px[c] * (1.0 - cover) + v * cover;
                }
            }
        }
        px
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub per_class: usize,
    /// Side of generated scenes when no clean directory is given.
    pub size: usize,
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ a) ^ b)
}

fn clean_sources(clean_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let Some(dir) = clean_dir else { return Ok(Vec::new()) };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images found in {}", dir.display())));
    }
    Ok(files)
}

/// Generate `per_class` tuples for every weather class under `out`, writing
/// `clean/`, `weather/` and `manifest.jsonl`. Clean images come from
/// `clean_dir` (cycled) or are procedural scenes.
pub fn build_dataset(clean_dir: Option<&Path>, out: &Path, spec: &SynthSpec) -> Result<Manifest> {
    if spec.per_class == 0 || spec.size == 0 {
        return Err(Error::config("per_class and size must be positive"));
    }
    let sources = clean_sources(clean_dir)?;
    std::fs::create_dir_all(out.join("clean"))?;
    std::fs::create_dir_all(out.join("weather"))?;
    let mut records = Vec::with_capacity(3 * spec.per_class);
    for class in WeatherClass::ALL {
        for i in 0..spec.per_class {
            let index = class.index() * spec.per_class + i;
            let item_seed = derive_seed(spec.seed, class.index() as u64, i as u64);
            let clean = if sources.is_empty() {
                // Quantize first so the stored PNG is exactly the image that was degraded.
                scene(spec.size, spec.size, derive_seed(spec.seed, 1000, index as u64)).quantized()
            } else {
                Image::load(&sources[index % sources.len()])?
            };
            let (weather, digest) = synthesize(&clean, class, item_seed)?;
            let name = format!("{index:05}.png");
            let clean_rel = format!("clean/{name}");
            let weather_rel = format!("weather/{name}");
            clean.save_png(out.join(&clean_rel))?;
            weather.save_png(out.join(&weather_rel))?;
            records.push(ManifestRecord {
                clean_path: clean_rel,
                weather_path: weather_rel,
                class: class.name().to_string(),
                seed: item_seed,
                params_digest: Some(digest),
                label: None,
            });
        }
    }
    let manifest = Manifest::new(out.to_path_buf(), records);
    manifest.save(&out.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// In-memory equivalent of [`build_dataset`] with procedural scenes: the
/// same images, quantized as if read back from the PNG files.
pub fn generate_samples(spec: &SynthSpec) -> Result<Vec<Sample>> {
    if spec.per_class == 0 || spec.size == 0 {
        return Err(Error::config("per_class and size must be positive"));
    }
    let mut out = Vec::with_capacity(3 * spec.per_class);
    for class in WeatherClass::ALL {
        for i in 0..spec.per_class {
            let index = class.index() * spec.per_class + i;
            let item_seed = derive_seed(spec.seed, class.index() as u64, i as u64);
            let clean = scene(spec.size, spec.size, derive_seed(spec.seed, 1000, index as u64)).quantized();
            let (weather, _) = synthesize(&clean, class, item_seed)?;
            out.push(Sample::new(weather.quantized(), clean, label_of(class))?);
        }
    }
    Ok(out)
}

/// One-hot label for a generated sample.
pub fn label_of(class: WeatherClass) -> WeatherLabel {
    WeatherLabel::one_hot(class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::eval_psnr;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn random_plane(h: usize, w: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane { height: h, width: w, data: (0..h * w).map(|_| rng.random()).collect() }
    }

    #[test]
    fn raindrop_identity_and_full_mask() {
        let c = random_image(8, 9, 0);
        let none = RaindropParams { mask: Plane::filled(8, 9, 0.0), residual: Image::zeros(8, 9) };
        assert_eq!(apply_raindrop(&c, &none).unwrap(), c);
        let r = random_image(8, 9, 1);
        let full = RaindropParams { mask: Plane::filled(8, 9, 1.0), residual: r.clone() };
        assert_eq!(apply_raindrop(&c, &full).unwrap(), r);
    }

    #[test]
    fn heavy_rain_identity_and_full_haze() {
        let c = random_image(8, 9, 2);
        let clear = HeavyRainParams {
            transmission: Plane::filled(8, 9, 1.0),
            streaks: vec![Image::zeros(8, 9), Image::zeros(8, 9)],
            airlight: [0.8; 3],
        };
        assert_eq!(apply_heavy_rain(&c, &clear).unwrap(), c);
        let haze = HeavyRainParams {
            transmission: Plane::filled(8, 9, 0.0),
            streaks: vec![random_image(8, 9, 3)],
            airlight: [0.7, 0.8, 0.9],
        };
        let out = apply_heavy_rain(&c, &haze).unwrap();
        for ch in 0..3 {
            for y in 0..8 {
                for x in 0..9 {
                    assert_eq!(out.get(ch, y, x), [0.7, 0.8, 0.9][ch]);
                }
            }
        }
    }

    #[test]
    fn snow_identity_and_full_mask() {
        let c = random_image(8, 9, 4);
        let s = random_image(8, 9, 5);
        let none = SnowParams { mask: Plane::filled(8, 9, 0.0), flakes: s.clone() };
        assert_eq!(apply_snow(&c, &none).unwrap(), c);
        let full = SnowParams { mask: Plane::filled(8, 9, 1.0), flakes: s.clone() };
        assert_eq!(apply_snow(&c, &full).unwrap(), s);
    }

    #[test]
    fn compositing_matches_scalar_oracle() {
        let (h, w) = (7, 6);
        let c = random_image(h, w, 10);
        let m = random_plane(h, w, 11);
        let r = random_image(h, w, 12);
        let out = apply_raindrop(&c, &RaindropParams { mask: m.clone(), residual: r.clone() }).unwrap();
        let t = random_plane(h, w, 13);
        let streaks = vec![random_image(h, w, 14), random_image(h, w, 15)];
        let a = [0.6f32, 0.7, 0.8];
        let hr = apply_heavy_rain(&c, &HeavyRainParams { transmission: t.clone(), streaks: streaks.clone(), airlight: a }).unwrap();
        let s = random_image(h, w, 16);
        let sn = apply_snow(&c, &SnowParams { mask: m.clone(), flakes: s.clone() }).unwrap();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let cv = c.get(ch, y, x) as f64;
                    let mv = m.get(y, x) as f64;
                    let e1 = ((1.0 - mv) * cv + r.get(ch, y, x) as f64).clamp(0.0, 1.0);
                    assert!((out.get(ch, y, x) as f64 - e1).abs() < 1e-7);
                    let tv = t.get(y, x) as f64;
                    let rs: f64 = streaks.iter().map(|s| s.get(ch, y, x) as f64).sum();
                    let e2 = (tv * (cv + rs) + (1.0 - tv) * a[ch] as f64).clamp(0.0, 1.0);
                    assert!((hr.get(ch, y, x) as f64 - e2).abs() < 1e-7);
                    let e3 = ((1.0 - mv) * cv + mv * s.get(ch, y, x) as f64).clamp(0.0, 1.0);
                    assert!((sn.get(ch, y, x) as f64 - e3).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn sampled_params_respect_invariants() {
        let c = scene(48, 40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rd = sample_raindrop(&c, &mut rng);
        let plane = 48 * 40;
        for (i, r) in rd.residual.data().iter().enumerate() {
            let m = rd.mask.data[i % plane];
            assert!((0.0..=1.0).contains(&m));
            if m == 0.0 {
                assert_eq!(*r, 0.0);
            }
        }
        let hr = sample_heavy_rain(&c, &mut rng);
        assert_eq!(hr.streaks.len(), 2);
        assert!(hr.transmission.data.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(hr.airlight.iter().all(|a| (0.0..=1.0).contains(a)));
        let sn = sample_snow(&c, &mut rng);
        assert!(sn.mask.data.iter().all(|m| (0.0..=1.0).contains(m)));
    }

    #[test]
    fn degradations_are_deterministic_and_nontrivial() {
        for seed in 0..6 {
            let c = scene(96, 96, seed);
            for class in WeatherClass::ALL {
                let (a, da) = synthesize(&c, class, seed * 7 + 1).unwrap();
                let (b, db) = synthesize(&c, class, seed * 7 + 1).unwrap();
                assert_eq!(a, b);
                assert_eq!(da, db);
                let p = eval_psnr(&a, &c).unwrap();
                assert!(p.is_finite() && p < 40.0, "{class:?} psnr {p}");
            }
        }
    }

    #[test]
    fn dataset_regeneration_is_bit_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SynthSpec { per_class: 2, size: 32, seed: 9 };
        let m1 = build_dataset(None, d1.path(), &spec).unwrap();
        let m2 = build_dataset(None, d2.path(), &spec).unwrap();
        assert_eq!(m1.records.len(), 6);
        for class in WeatherClass::ALL {
            assert_eq!(m1.records.iter().filter(|r| r.class == class.name()).count(), 2);
        }
        for (a, b) in m1.records.iter().zip(&m2.records) {
            assert_eq!(a, b);
            for rel in [&a.clean_path, &a.weather_path] {
                let x = std::fs::read(d1.path().join(rel)).unwrap();
                let y = std::fs::read(d2.path().join(rel)).unwrap();
                assert_eq!(Sha256::digest(&x), Sha256::digest(&y));
            }
        }
        let reloaded = Manifest::load(&d1.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded.records, m1.records);
    }

    #[test]
    fn in_memory_generation_matches_written_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { per_class: 2, size: 24, seed: 5 };
        let from_disk = build_dataset(None, dir.path(), &spec).unwrap().load_all().unwrap();
        assert_eq!(generate_samples(&spec).unwrap(), from_disk);
    }

    #[test]
    fn clean_directory_is_used_when_given() {
        let src = tempfile::tempdir().unwrap();
        scene(24, 24, 1).save_png(src.path().join("a.png")).unwrap();
        let out = tempfile::tempdir().unwrap();
        let m = build_dataset(Some(src.path()), out.path(), &SynthSpec { per_class: 1, size: 64, seed: 0 }).unwrap();
        let img = Image::load(out.path().join(&m.records[0].clean_path)).unwrap();
        assert_eq!(img.dims(), (24, 24));
        let empty = tempfile::tempdir().unwrap();
        assert!(build_dataset(Some(empty.path()), out.path(), &SynthSpec { per_class: 1, size: 8, seed: 0 }).is_err());
    }
}
