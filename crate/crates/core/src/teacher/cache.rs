//! Content-addressed cache of teacher outputs.
//!
//! Entries are keyed by the SHA-256 of (teacher name, teacher weight digest,
//! image shape, image bytes) and held in memory. With a cache directory set,
//! each entry is also persisted as one blob:
//!
//! ```text
//! b"AWFC" | u32 version | u32 name_len | name | u32 tensor_count
//! | per tensor: u32 rank, rank x u64 dims | f32 LE data ... | sha256 of all preceding bytes
//! ```
//!
//! Blobs are written to a temporary file and renamed into place.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use super::Teacher;
use crate::error::{Error, Result};

pub const CACHE_DIR_ENV: &str = "ALLWEATHER_CACHE_DIR";

const MAGIC: &[u8; 4] = b"AWFC";
const VERSION: u32 = 1;

/// Teacher outputs for a batch: one map per distillation stage and the
/// global embedding `(N, D)`.
#[derive(Clone, Debug)]
pub struct TeacherFeatures {
    pub stages: Vec<Tensor>,
    pub embedding: Tensor,
}

impl TeacherFeatures {
    pub fn compute(teacher: &dyn Teacher, images: &Tensor) -> Result<Self> {
        Ok(Self {
            stages: teacher.stage_features(images)?,
            embedding: teacher.global_embedding(images)?,
        })
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.stages.iter().chain(std::iter::once(&self.embedding))
    }

    fn concat(parts: &[TeacherFeatures]) -> Result<Self> {
        let n_stages = parts[0].stages.len();
        let stages = (0..n_stages)
            .map(|s| Ok(Tensor::cat(&parts.iter().map(|p| &p.stages[s]).collect::<Vec<_>>(), 0)?))
            .collect::<Result<Vec<_>>>()?;
        let embedding = Tensor::cat(&parts.iter().map(|p| &p.embedding).collect::<Vec<_>>(), 0)?;
        Ok(Self { stages, embedding })
    }
}

pub struct FeatureCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<[u8; 32], TeacherFeatures>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl FeatureCache {
    pub fn in_memory() -> Self {
        Self::with_dir(None)
    }

    pub fn with_dir(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            memory: Mutex::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// Uses `$ALLWEATHER_CACHE_DIR` when set, else `fallback`.
    pub fn from_env(fallback: Option<PathBuf>) -> Self {
        let dir = std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from).or(fallback);
        Self::with_dir(dir)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// `(hits, misses)` since construction.
    pub fn stats(&self) -> (usize, usize) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    pub fn key(teacher_name: &str, teacher_digest: &[u8; 32], image: &Tensor) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        h.update(teacher_name.as_bytes());
        h.update([0]);
        h.update(teacher_digest);
        for d in image.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
        Ok(h.finalize().into())
    }

    fn blob_path(&self, key: &[u8; 32]) -> Option<PathBuf> {
        let hex: String = key.iter().map(|b| format!("{b:02x}")).collect();
        self.dir.as_ref().map(|d| d.join(format!("{hex}.bin")))
    }

    /// Teacher outputs for every image of `(N, 3, H, W)`, computed one image
    /// at a time so a cached entry never depends on batch composition.
    pub fn features(&self, teacher: &dyn Teacher, images: &Tensor) -> Result<TeacherFeatures> {
        let name = teacher.name().to_string();
        let digest = teacher.digest()?;
        let n = images.dim(0)?;
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let image = images.narrow(0, i, 1)?;
            let key = Self::key(&name, &digest, &image)?;
            parts.push(self.get_or_compute(teacher, &name, &key, &image)?);
        }
        TeacherFeatures::concat(&parts)
    }

    fn get_or_compute(&self, teacher: &dyn Teacher, name: &str, key: &[u8; 32], image: &Tensor) -> Result<TeacherFeatures> {
        if let Some(hit) = self.memory.lock().expect("cache lock").get(key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        if let Some(path) = self.blob_path(key) {
            if path.is_file() {
                match read_blob(&path, name, image.device()) {
                    Ok(f) => {
                        self.hits.fetch_add(1, Ordering::Relaxed);
                        self.memory.lock().expect("cache lock").insert(*key, f.clone());
                        return Ok(f);
                    }
                    Err(e) => log::warn!("discarding cache entry {}: {e}", path.display()),
                }
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let f = TeacherFeatures::compute(teacher, image)?;
        if let Some(path) = self.blob_path(key) {
            write_blob(&path, name, &f)?;
        }
        self.memory.lock().expect("cache lock").insert(*key, f.clone());
        Ok(f)
    }
}

pub fn encode_blob(name: &str, features: &TeacherFeatures) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let tensors: Vec<&Tensor> = features.tensors().collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.dims() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    for t in &tensors {
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Cache("truncated blob".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_blob(bytes: &[u8], expected_name: &str, device: &Device) -> Result<TeacherFeatures> {
    if bytes.len() < 32 + 16 {
        return Err(Error::Cache("blob too short".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Cache("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC || r.u32()? != VERSION {
        return Err(Error::Cache("bad magic or version".into()));
    }
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Cache("bad teacher name".into()))?;
    if name != expected_name {
        return Err(Error::Cache(format!("blob belongs to teacher `{name}`, expected `{expected_name}`")));
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::Cache("blob holds no tensors".into()));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()? as usize;
        shapes.push((0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?);
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push(Tensor::from_vec(v, shape, device)?);
    }
    if r.pos != body.len() {
        return Err(Error::Cache("trailing bytes in blob".into()));
    }
    let embedding = tensors.pop().expect("count > 0");
    Ok(TeacherFeatures { stages: tensors, embedding })
}

pub fn read_blob(path: &Path, expected_name: &str, device: &Device) -> Result<TeacherFeatures> {
    decode_blob(&std::fs::read(path)?, expected_name, device)
}

pub fn write_blob(path: &Path, name: &str, features: &TeacherFeatures) -> Result<()> {
    let dir = path.parent().ok_or_else(|| Error::Cache("cache path has no parent".into()))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&tmp, encode_blob(name, features)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
