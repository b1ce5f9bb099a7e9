//! CLIP teacher loaded from safetensors files.
//!
//! Expected files in the weights directory:
//!
//! * [`CLIP_VIT_FILE`]: the vision tower of ViT-B/32 in the Hugging Face
//!   layout (`vision_model.*`, `visual_projection.weight`). Its projected
//!   class token is the global embedding.
//! * [`CLIP_RESNET_FILE`]: the ModifiedResNet image encoder (RN50) in the
//!   original layout (`visual.conv1.weight`, `visual.layer1.0.conv1.weight`,
//!   ...). Its stem and layers 2-4 provide distillation features.
//! * [`CLIP_TEXT_FILE`]: precomputed text embeddings. One tensor
//!   `text_embeddings` of shape `(K, D)` plus a `prompts` metadata entry
//!   holding a JSON array of the `K` prompt strings.
//!
//! Architecture hyper-parameters (widths, depths, patch size, input size)
//! are read from tensor shapes, so smaller checkpoints in the same layout work.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use sha2::{Digest, Sha256};

use super::{normalize_images, resize_match, PromptSet, Teacher, TeacherSpec, CLIP_MEAN, CLIP_STD};
use crate::error::{Error, Result};
use crate::nn::{kernels, ops};

pub const CLIP_VIT_FILE: &str = "clip_vit_b32.safetensors";
pub const CLIP_RESNET_FILE: &str = "clip_rn50.safetensors";
pub const CLIP_TEXT_FILE: &str = "clip_text_embeddings.safetensors";

const HOWTO: &str = "export the CLIP vision towers and the prompt embeddings to safetensors \
    (see the README section on the pretrained teacher)";

struct Weights {
    map: HashMap<String, Tensor>,
    file: PathBuf,
    dir: PathBuf,
}

impl Weights {
    fn open(dir: &Path, file: &str, device: &Device) -> Result<Self> {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(Error::TeacherLoad {
                name: "clip".into(),
                dir: dir.to_path_buf(),
                reason: format!("missing `{file}`; {HOWTO}"),
            });
        }
        let map = candle_core::safetensors::load(&path, device).map_err(|e| Error::TeacherLoad {
            name: "clip".into(),
            dir: dir.to_path_buf(),
            reason: format!("cannot read `{file}`: {e}"),
        })?;
        let map = map
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            map,
            file: path,
            dir: dir.to_path_buf(),
        })
    }

    fn get(&self, name: &str) -> Result<Tensor> {
        self.map.get(name).cloned().ok_or_else(|| Error::TeacherLoad {
            name: "clip".into(),
            dir: self.dir.clone(),
            reason: format!("`{}` has no tensor `{name}`", self.file.display()),
        })
    }

    fn count_indexed(&self, prefix: &str) -> usize {
        let mut i = 0;
        while self.map.keys().any(|k| k.starts_with(&format!("{prefix}{i}."))) {
            i += 1;
        }
        i
    }

    fn hash_into(&self, h: &mut Sha256) -> Result<()> {
        let mut names: Vec<_> = self.map.keys().collect();
        names.sort();
        for n in names {
            h.update(n.as_bytes());
            for v in self.map[n].flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(())
    }
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().expect("non-scalar");
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let mut y = x.reshape((rows, last))?.matmul(&w.t()?)?;
    if let Some(b) = b {
        y = y.broadcast_add(b)?;
    }
    let mut out = dims;
    *out.last_mut().expect("non-scalar") = w.dim(0)?;
    Ok(y.reshape(out)?)
}

fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    Ok((x * ops::sigmoid(&(x * 1.702)?)?)?)
}

struct VitLayer {
    ln1: (Tensor, Tensor),
    q: (Tensor, Tensor),
    k: (Tensor, Tensor),
    v: (Tensor, Tensor),
    out: (Tensor, Tensor),
    ln2: (Tensor, Tensor),
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
}

struct VisionTransformer {
    patch: Tensor,
    class_embedding: Tensor,
    positions: Tensor,
    ln_pre: (Tensor, Tensor),
    layers: Vec<VitLayer>,
    ln_post: (Tensor, Tensor),
    projection: Tensor,
    heads: usize,
    patch_size: usize,
    image_size: usize,
}

impl VisionTransformer {
    fn load(w: &Weights) -> Result<Self> {
        let pair = |p: &str| -> Result<(Tensor, Tensor)> { Ok((w.get(&format!("{p}.weight"))?, w.get(&format!("{p}.bias"))?)) };
        let patch = w.get("vision_model.embeddings.patch_embedding.weight")?;
        let class_embedding = w.get("vision_model.embeddings.class_embedding")?;
        let positions = w.get("vision_model.embeddings.position_embedding.weight")?;
        let width = class_embedding.dim(0)?;
        let patch_size = patch.dim(3)?;
        let grid = ((positions.dim(0)? - 1) as f64).sqrt().round() as usize;
        let n_layers = w.count_indexed("vision_model.encoder.layers.");
        let layers = (0..n_layers)
            .map(|i| {
                let p = format!("vision_model.encoder.layers.{i}");
                Ok(VitLayer {
                    ln1: pair(&format!("{p}.layer_norm1"))?,
                    q: pair(&format!("{p}.self_attn.q_proj"))?,
                    k: pair(&format!("{p}.self_attn.k_proj"))?,
                    v: pair(&format!("{p}.self_attn.v_proj"))?,
                    out: pair(&format!("{p}.self_attn.out_proj"))?,
                    ln2: pair(&format!("{p}.layer_norm2"))?,
                    fc1: pair(&format!("{p}.mlp.fc1"))?,
                    fc2: pair(&format!("{p}.mlp.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch,
            class_embedding,
            positions,
            ln_pre: pair("vision_model.pre_layrnorm")?,
            layers,
            ln_post: pair("vision_model.post_layernorm")?,
            projection: w.get("visual_projection.weight")?,
            heads: (width / 64).max(1),
            patch_size,
            image_size: grid * patch_size,
        })
    }

    fn embed_dim(&self) -> Result<usize> {
        Ok(self.projection.dim(0)?)
    }

    fn attention(&self, layer: &VitLayer, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        let hd = c / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((n, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(linear(x, &layer.q.0, Some(&layer.q.1))?)?;
        let k = split(linear(x, &layer.k.0, Some(&layer.k.1))?)?;
        let v = split(linear(x, &layer.v.0, Some(&layer.v.1))?)?;
        let attn = ops::softmax_last(&(q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((n, l, c))?;
        linear(&o, &layer.out.0, Some(&layer.out.1))
    }

    /// `(N, 3, S, S)` normalised images at the native resolution.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let patches = kernels::conv2d(x, &self.patch, self.patch_size, 0)?;
        let tokens = ops::map_to_tokens(&patches)?;
        let c = tokens.dim(2)?;
        let cls = self.class_embedding.reshape((1, 1, c))?.broadcast_as((n, 1, c))?;
        let mut x = Tensor::cat(&[&cls.contiguous()?, &tokens], 1)?.broadcast_add(&self.positions.unsqueeze(0)?)?;
        x = ops::layer_norm(&x, &self.ln_pre.0, &self.ln_pre.1, 1e-5)?;
        for layer in &self.layers {
            let h = ops::layer_norm(&x, &layer.ln1.0, &layer.ln1.1, 1e-5)?;
            x = (&x + self.attention(layer, &h)?)?;
            let h = ops::layer_norm(&x, &layer.ln2.0, &layer.ln2.1, 1e-5)?;
            let h = quick_gelu(&linear(&h, &layer.fc1.0, Some(&layer.fc1.1))?)?;
            x = (&x + linear(&h, &layer.fc2.0, Some(&layer.fc2.1))?)?;
        }
        let cls = x.narrow(1, 0, 1)?.squeeze(1)?;
        let cls = ops::layer_norm(&cls, &self.ln_post.0, &self.ln_post.1, 1e-5)?;
        linear(&cls, &self.projection, None)
    }
}

struct BatchNorm {
    scale: Tensor,
    shift: Tensor,
}

impl BatchNorm {
    fn load(w: &Weights, p: &str) -> Result<Self> {
        let g = w.get(&format!("{p}.weight"))?;
        let b = w.get(&format!("{p}.bias"))?;
        let m = w.get(&format!("{p}.running_mean"))?;
        let v = w.get(&format!("{p}.running_var"))?;
        let scale = g.div(&(v + 1e-5)?.sqrt()?)?;
        let shift = (b - m.mul(&scale)?)?;
        let c = scale.dim(0)?;
        Ok(Self {
            scale: scale.reshape((1, c, 1, 1))?,
            shift: shift.reshape((1, c, 1, 1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

struct Bottleneck {
    conv1: Tensor,
    bn1: BatchNorm,
    conv2: Tensor,
    bn2: BatchNorm,
    conv3: Tensor,
    bn3: BatchNorm,
    downsample: Option<(Tensor, BatchNorm)>,
    stride: usize,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.bn1.forward(&kernels::conv2d(x, &self.conv1, 1, 0)?)?.relu()?;
        out = self.bn2.forward(&kernels::conv2d(&out, &self.conv2, 1, 1)?)?.relu()?;
        if self.stride > 1 {
            out = out.avg_pool2d(self.stride)?;
        }
        out = self.bn3.forward(&kernels::conv2d(&out, &self.conv3, 1, 0)?)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => {
                let pooled = if self.stride > 1 { x.avg_pool2d(self.stride)? } else { x.clone() };
                bn.forward(&kernels::conv2d(&pooled, conv, 1, 0)?)?
            }
            None => x.clone(),
        };
        Ok((out + identity)?.relu()?)
    }
}

struct ModifiedResNet {
    stem: Vec<(Tensor, BatchNorm, usize)>,
    layers: Vec<Vec<Bottleneck>>,
}

impl ModifiedResNet {
    fn load(w: &Weights) -> Result<Self> {
        let stem = (1..=3)
            .map(|i| {
                Ok((
                    w.get(&format!("visual.conv{i}.weight"))?,
                    BatchNorm::load(w, &format!("visual.bn{i}"))?,
                    if i == 1 { 2 } else { 1 },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(4);
        for l in 1..=4 {
            let prefix = format!("visual.layer{l}.");
            let blocks = w.count_indexed(&prefix);
            if blocks == 0 {
                return Err(Error::TeacherLoad {
                    name: "clip".into(),
                    dir: w.dir.clone(),
                    reason: format!("no blocks found under `{prefix}`"),
                });
            }
            let layer = (0..blocks)
                .map(|b| {
                    let p = format!("{prefix}{b}");
                    let ds = format!("{p}.downsample.0.weight");
                    let downsample = if w.map.contains_key(&ds) {
                        Some((w.get(&ds)?, BatchNorm::load(w, &format!("{p}.downsample.1"))?))
                    } else {
                        None
                    };
                    Ok(Bottleneck {
                        conv1: w.get(&format!("{p}.conv1.weight"))?,
                        bn1: BatchNorm::load(w, &format!("{p}.bn1"))?,
                        conv2: w.get(&format!("{p}.conv2.weight"))?,
                        bn2: BatchNorm::load(w, &format!("{p}.bn2"))?,
                        conv3: w.get(&format!("{p}.conv3.weight"))?,
                        bn3: BatchNorm::load(w, &format!("{p}.bn3"))?,
                        downsample,
                        stride: if b == 0 && l > 1 { 2 } else { 1 },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(layer);
        }
        Ok(Self { stem, layers })
    }

    fn stage_channels(&self) -> Result<Vec<usize>> {
        let mut out = vec![self.stem[2].0.dim(0)?];
        for layer in &self.layers {
            out.push(layer.last().expect("non-empty").conv3.dim(0)?);
        }
        Ok(out)
    }

    /// All five stage outputs: stem, layer1..layer4.
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = x.clone();
        for (conv, bn, stride) in &self.stem {
            x = bn.forward(&kernels::conv2d(&x, conv, *stride, 1)?)?.relu()?;
        }
        x = x.avg_pool2d(2)?;
        let mut out = vec![x.clone()];
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x)?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

pub struct ClipTeacher {
    spec: TeacherSpec,
    vit: VisionTransformer,
    resnet: ModifiedResNet,
    prompts: Vec<String>,
    text: Tensor,
    digest: [u8; 32],
}

impl ClipTeacher {
    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let vit_w = Weights::open(dir, CLIP_VIT_FILE, device)?;
        let rn_w = Weights::open(dir, CLIP_RESNET_FILE, device)?;
        let (text, prompts) = load_text(dir, device)?;
        let vit = VisionTransformer::load(&vit_w)?;
        let resnet = ModifiedResNet::load(&rn_w)?;
        let embed_dim = vit.embed_dim()?;
        if text.dim(1)? != embed_dim {
            return Err(Error::TeacherLoad {
                name: "clip".into(),
                dir: dir.to_path_buf(),
                reason: format!(
                    "text embeddings have dimension {}, image embeddings {embed_dim}",
                    text.dim(1)?
                ),
            });
        }
        let mut h = Sha256::new();
        vit_w.hash_into(&mut h)?;
        rn_w.hash_into(&mut h)?;
        let channels = resnet.stage_channels()?;
        let stage_indices = vec![0, 2, 3, 4];
        let cumulative = [4, 4, 8, 16, 32];
        Ok(Self {
            spec: TeacherSpec {
                name: "clip".into(),
                stage_channels: stage_indices.iter().map(|&i| channels[i]).collect(),
                stage_strides: stage_indices.iter().map(|&i| cumulative[i]).collect(),
                stage_indices,
                embed_dim,
                input_size: Some(vit.image_size),
                mean: CLIP_MEAN,
                std: CLIP_STD,
            },
            vit,
            resnet,
            prompts,
            text,
            digest: h.finalize().into(),
        })
    }

    fn prepare(&self, images: &Tensor) -> Result<Tensor> {
        let s = self.vit.image_size;
        let x = resize_match(&images.detach().to_dtype(DType::F32)?, s, s)?;
        normalize_images(&x, self.spec.mean, self.spec.std)
    }
}

fn load_text(dir: &Path, device: &Device) -> Result<(Tensor, Vec<String>)> {
    let path = dir.join(CLIP_TEXT_FILE);
    let err = |reason: String| Error::TeacherLoad {
        name: "clip".into(),
        dir: dir.to_path_buf(),
        reason,
    };
    if !path.is_file() {
        return Err(err(format!("missing `{CLIP_TEXT_FILE}`; {HOWTO}")));
    }
    let bytes = std::fs::read(&path)?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let prompts: Vec<String> = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("prompts"))
        .ok_or_else(|| err(format!("`{CLIP_TEXT_FILE}` has no `prompts` metadata")))
        .and_then(|s| serde_json::from_str(s).map_err(|e| err(format!("bad `prompts` metadata: {e}"))))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let text = tensors
        .get("text_embeddings")
        .ok_or_else(|| err(format!("`{CLIP_TEXT_FILE}` has no `text_embeddings` tensor")))?
        .to_dtype(DType::F32)?;
    if text.dim(0)? != prompts.len() {
        return Err(err("prompt count does not match the embedding rows".into()));
    }
    Ok((ops::l2_normalize(&text, 0.0)?, prompts))
}

impl Teacher for ClipTeacher {
    fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    fn stage_features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let all = self.resnet.forward(&self.prepare(images)?)?;
        Ok(self.spec.stage_indices.iter().map(|&i| all[i].clone()).collect())
    }

    fn global_embedding(&self, images: &Tensor) -> Result<Tensor> {
        self.vit.forward(&self.prepare(images)?)
    }

    fn text_embeddings(&self, prompts: &PromptSet) -> Result<Tensor> {
        let rows = prompts
            .prompts
            .iter()
            .map(|p| {
                let i = self.prompts.iter().position(|q| q == p).ok_or_else(|| {
                    Error::config(format!("no precomputed text embedding for prompt `{p}`"))
                })?;
                Ok(self.text.narrow(0, i, 1)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    fn digest(&self) -> Result<[u8; 32]> {
        Ok(self.digest)
    }
}

/// Mean over the spatial axes, used by tests and diagnostics.
#[allow(dead_code)]
fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
