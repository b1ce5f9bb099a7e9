//! Planar RGB images with values in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An `H x W` RGB image stored channel-major (`C, H, W`) as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                CHANNELS * height * width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; CHANNELS * plane];
        for (c, v) in rgb.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*v);
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Build from a per-pixel function returning RGB.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; CHANNELS * plane];
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                for c in 0..CHANNELS {
                    data[c * plane + y * width + x] = rgb[c];
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Copy of the `h x w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y},{x}) exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(CHANNELS * h * w);
        for c in 0..CHANNELS {
            for yy in y..y + h {
                let start = self.index(c, yy, x);
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Self::new(h, w, data)
    }

    /// Round-trip through 8-bit quantization, as happens when saving to PNG.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| quantize(*v) as f32 / 255.0)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let plane = w * h;
        let mut data = vec![0.0; CHANNELS * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    /// Lossless 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let plane = self.height * self.width;
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            for c in 0..CHANNELS {
                px.0[c] = quantize(self.data[c * plane + i]);
            }
        }
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, CHANNELS, self.height, self.width), device)?
            .to_dtype(dtype)?)
    }

    /// Stack equally sized images into an `(N, 3, H, W)` tensor.
    pub fn batch_to_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty image batch"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            if img.dims() != (h, w) {
                return Err(Error::shape("images in a batch must share dimensions"));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), CHANNELS, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::batch_to_tensor`].
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let (n, c, h, w) = t.dims4()?;
        if c != CHANNELS {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let per = CHANNELS * h * w;
        (0..n)
            .map(|i| Image::new(h, w, flat[i * per..(i + 1) * per].to_vec()))
            .collect()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = if t.rank() == 3 { t.unsqueeze(0)? } else { t.clone() };
        let mut v = Self::batch_from_tensor(&t)?;
        if v.len() != 1 {
            return Err(Error::shape("expected a single image tensor"));
        }
        Ok(v.remove(0))
    }

    /// Pad right/bottom edges by replication up to the given dimensions.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::shape("padding target smaller than image"));
        }
        Ok(Self::from_fn(height, width, |y, x| {
            let yy = y.min(self.height - 1);
            let xx = x.min(self.width - 1);
            [self.get(0, yy, xx), self.get(1, yy, xx), self.get(2, yy, xx)]
        }))
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
