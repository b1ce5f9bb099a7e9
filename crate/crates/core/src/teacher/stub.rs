//! Seeded random-weight teachers for tests and CPU-scale training.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{normalize_images, PromptSet, Teacher, TeacherSpec, CLIP_MEAN, CLIP_STD, IMAGENET_MEAN, IMAGENET_STD};
use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Init, Linear, ParamStore};

/// A five-stage convolutional encoder with frozen random weights.
///
/// Stage strides are 4, 4, 8, 16, 32; stages 1, 3, 4 and 5 are exposed for
/// distillation. The global embedding is a fixed random projection of the
/// per-channel mean and standard deviation of every stage.
pub struct StubTeacher {
    spec: TeacherSpec,
    store: ParamStore,
    convs: Vec<Conv2d>,
    embed: Linear,
    seed: u64,
}

impl StubTeacher {
    pub fn vision_language(seed: u64, device: &Device) -> Result<Self> {
        Self::build("stub-vl", seed, &[32, 48, 64, 96, 128], 512, CLIP_MEAN, CLIP_STD, device)
    }

    pub fn classifier(seed: u64, device: &Device) -> Result<Self> {
        Self::build("stub-classifier", seed, &[24, 32, 48, 64, 96], 256, IMAGENET_MEAN, IMAGENET_STD, device)
    }

    fn build(
        name: &str,
        seed: u64,
        channels: &[usize; 5],
        embed_dim: usize,
        mean: [f32; 3],
        std: [f32; 3],
        device: &Device,
    ) -> Result<Self> {
        let store = ParamStore::frozen(seed, DType::F32, device);
        let root = store.root().pp(name);
        let strides = [4, 1, 2, 2, 2];
        let kernels = [4, 3, 3, 3, 3];
        let mut convs = Vec::with_capacity(5);
        let mut in_ch = 3;
        for s in 0..5 {
            let k = kernels[s];
            let pad = if k == strides[s] { 0 } else { 1 };
            convs.push(Conv2d::with_init(
                &root.pp(format!("stage{s}")),
                in_ch,
                channels[s],
                k,
                strides[s],
                pad,
                true,
                Init::kaiming_normal(in_ch * k * k),
            )?);
            in_ch = channels[s];
        }
        let stats = 2 * channels.iter().sum::<usize>();
        let embed = Linear::with_init(
            &root.pp("embed"),
            stats,
            embed_dim,
            false,
            Init::Normal { std: (1.0 / stats as f64).sqrt() },
            Init::Zeros,
        )?;
        let stage_indices = vec![0, 2, 3, 4];
        let cumulative = [4, 4, 8, 16, 32];
        Ok(Self {
            spec: TeacherSpec {
                name: name.to_string(),
                stage_channels: stage_indices.iter().map(|&i| channels[i]).collect(),
                stage_strides: stage_indices.iter().map(|&i| cumulative[i]).collect(),
                stage_indices,
                embed_dim,
                input_size: None,
                mean,
                std,
            },
            store,
            convs,
            embed,
            seed,
        })
    }

    fn all_stages(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "stub teacher needs (N, 3, H, W) with H, W multiples of 32, got {:?}",
                images.dims()
            )));
        }
        let mut x = normalize_images(&images.detach().to_dtype(DType::F32)?, self.spec.mean, self.spec.std)?;
        let mut out = Vec::with_capacity(5);
        for conv in &self.convs {
            x = ops::gelu(&conv.forward(&x)?)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

impl Teacher for StubTeacher {
    fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    fn stage_features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let all = self.all_stages(images)?;
        Ok(self.spec.stage_indices.iter().map(|&i| all[i].clone()).collect())
    }

    fn global_embedding(&self, images: &Tensor) -> Result<Tensor> {
        let mut stats = Vec::with_capacity(10);
        for f in self.all_stages(images)? {
            let (n, c, h, w) = f.dims4()?;
            let flat = f.reshape((n, c, h * w))?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?;
            stats.push(mean.squeeze(D::Minus1)?);
            stats.push((var + 1e-6)?.sqrt()?);
        }
        // f64 accumulation keeps rows independent of the batch size.
        let stats = Tensor::cat(&stats, 1)?.to_dtype(DType::F64)?;
        let w = self.embed.weight().to_dtype(DType::F64)?;
        Ok(stats.matmul(&w.t()?)?.to_dtype(DType::F32)?)
    }

    fn text_embeddings(&self, prompts: &PromptSet) -> Result<Tensor> {
        let d = self.spec.embed_dim;
        let mut rows = Vec::with_capacity(prompts.len() * d);
        for prompt in &prompts.prompts {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(self.spec.name.as_bytes());
            h.update(prompt.as_bytes());
            let digest = h.finalize();
            let mut rng = ChaCha8Rng::from_seed(digest.into());
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            rows.extend(v.iter().map(|x| (x / norm) as f32));
        }
        Ok(Tensor::from_vec(rows, (prompts.len(), d), self.store.device())?)
    }

    fn digest(&self) -> Result<[u8; 32]> {
        self.store.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n * 3 * size * size)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                (0.5 + 0.2 * x).clamp(0.0, 1.0) as f32
            })
            .collect();
        Tensor::from_vec(v, (n, 3, size, size), &Device::Cpu).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn stage_features_follow_stride_schedule() {
        let t = StubTeacher::vision_language(0, &Device::Cpu).unwrap();
        let f = t.stage_features(&images(2, 64, 1)).unwrap();
        assert_eq!(f.len(), 4);
        for ((feat, c), s) in f.iter().zip(&t.spec().stage_channels).zip(&t.spec().stage_strides) {
            assert_eq!(feat.dims(), &[2, *c, 64 / s, 64 / s]);
        }
        assert_eq!(t.spec().stage_strides, vec![4, 8, 16, 32]);
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let x = images(1, 32, 2);
        let a = StubTeacher::vision_language(3, &Device::Cpu).unwrap();
        let b = StubTeacher::vision_language(3, &Device::Cpu).unwrap();
        let c = StubTeacher::vision_language(4, &Device::Cpu).unwrap();
        assert_eq!(bits(&a.stage_features(&x).unwrap()[0]), bits(&b.stage_features(&x).unwrap()[0]));
        assert_eq!(bits(&a.global_embedding(&x).unwrap()), bits(&a.global_embedding(&x).unwrap()));
        assert_ne!(bits(&a.global_embedding(&x).unwrap()), bits(&c.global_embedding(&x).unwrap()));
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn batched_embedding_matches_single() {
        let t = StubTeacher::vision_language(5, &Device::Cpu).unwrap();
        let x = images(3, 32, 6);
        let batched = t.global_embedding(&x).unwrap();
        assert_eq!(batched.dims(), &[3, 512]);
        for i in 0..3 {
            let single = t.global_embedding(&x.narrow(0, i, 1).unwrap()).unwrap();
            let diff = (single - batched.narrow(0, i, 1).unwrap()).unwrap().abs().unwrap().max_keepdim(1).unwrap();
            assert!(diff.flatten_all().unwrap().to_vec1::<f32>().unwrap()[0] < 1e-6);
        }
    }

    #[test]
    fn text_embeddings_are_unit_rows() {
        let t = StubTeacher::vision_language(7, &Device::Cpu).unwrap();
        let e = t.text_embeddings(&PromptSet::weather()).unwrap();
        assert_eq!(e.dims(), &[3, 512]);
        let norms = e.sqr().unwrap().sum(1).unwrap().sqrt().unwrap().to_vec1::<f32>().unwrap();
        assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-6));
        assert_eq!(bits(&e), bits(&t.text_embeddings(&PromptSet::weather()).unwrap()));
    }

    #[test]
    fn classifier_variant_has_its_own_spec() {
        let t = StubTeacher::classifier(0, &Device::Cpu).unwrap();
        assert_eq!(t.spec().embed_dim, 256);
        assert_eq!(t.global_embedding(&images(1, 32, 0)).unwrap().dims(), &[1, 256]);
    }
}
