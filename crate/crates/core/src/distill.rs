//! Soft residual distillation.
//!
//! Targets are the standardized difference between teacher features of the
//! clean and the degraded image. Every dynamic-residual map of the matching
//! student stage is standardized and pulled towards that target with a
//! mean-reduced L1 distance.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teacher::{channel_match, resize_match};

pub const NORM_EPS: f64 = 1e-6;

/// How the per-stage block count enters the stage average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockScaling {
    /// `1/m * sum_j L_j / N_j`.
    PerStage,
    /// `1/(m * N) * sum_j L_j` with `N` the block count of the last stage.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Epoch from which the distillation term is added.
    pub start_epoch: usize,
    pub weight: f64,
    /// Distil every block of a stage, or only its last block.
    pub match_all_blocks: bool,
    pub normalize: bool,
    pub block_scaling: BlockScaling,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            start_epoch: 200,
            weight: 0.1,
            match_all_blocks: true,
            normalize: true,
            block_scaling: BlockScaling::PerStage,
        }
    }
}

impl DistillConfig {
    pub fn active(&self, epoch: usize) -> bool {
        epoch >= self.start_epoch
    }
}

/// Per-channel standardization over the spatial axes of `(N, C, H, W)`.
pub fn standardize(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?.reshape((n, c, h, w))?)
}

/// `norm(clean - weather)` for one teacher stage.
pub fn residual_target(clean: &Tensor, weather: &Tensor) -> Result<Tensor> {
    if clean.dims() != weather.dims() {
        return Err(Error::shape(format!(
            "teacher features differ in shape: {:?} vs {:?}",
            clean.dims(),
            weather.dims()
        )));
    }
    standardize(&(clean - weather)?)
}

/// `sum_i mean|norm(s_i) - target|` (or without `norm` when `normalize` is off).
pub fn stage_distill_loss(student: &[Tensor], target: &Tensor, normalize: bool) -> Result<Tensor> {
    let (first, rest) = student
        .split_first()
        .ok_or_else(|| Error::shape("stage distillation needs at least one residual map"))?;
    let term = |s: &Tensor| -> Result<Tensor> {
        if s.dims() != target.dims() {
            return Err(Error::shape(format!(
                "student residual {:?} does not match target {:?}",
                s.dims(),
                target.dims()
            )));
        }
        let s = if normalize { standardize(s)? } else { s.clone() };
        Ok((s - target)?.abs()?.mean_all()?)
    };
    let mut total = term(first)?;
    for s in rest {
        total = (total + term(s)?)?;
    }
    Ok(total)
}

/// Combine stage losses with the block-count scaling.
pub fn total_distill_loss(stage_losses: &[Tensor], blocks: &[usize], scaling: BlockScaling) -> Result<Tensor> {
    if stage_losses.is_empty() || stage_losses.len() != blocks.len() {
        return Err(Error::shape(format!(
            "{} stage losses for {} stages",
            stage_losses.len(),
            blocks.len()
        )));
    }
    let m = stage_losses.len() as f64;
    let global = *blocks.last().expect("non-empty") as f64;
    let mut total: Option<Tensor> = None;
    for (l, &n) in stage_losses.iter().zip(blocks) {
        let scale = match scaling {
            BlockScaling::PerStage => 1.0 / (m * n as f64),
            BlockScaling::Global => 1.0 / (m * global),
        };
        let t = l.affine(scale, 0.0)?;
        total = Some(match total {
            Some(acc) => (acc + t)?,
            None => t,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Number of channels both sides are pooled to: the smaller of the two.
pub fn matched_channels(student: usize, teacher: usize) -> usize {
    student.min(teacher)
}

/// Bring a student residual map and teacher features of one stage to a
/// common shape. The teacher side is resized to the student resolution;
/// both sides are channel-pooled to the smaller channel count.
pub fn align_pair(student: &Tensor, teacher: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, sc, sh, sw) = student.dims4()?;
    let (_, tc, _, _) = teacher.dims4()?;
    let c = matched_channels(sc, tc);
    let t = channel_match(&resize_match(teacher, sh, sw)?, c)?;
    Ok((channel_match(student, c)?, t))
}

/// Full distillation term for one batch.
///
/// `student[s]` lists the residual maps of stage `s` (block order);
/// `clean` / `weather` hold the teacher features for the same stage.
pub fn distill_loss(student: &[Vec<Tensor>], clean: &[Tensor], weather: &[Tensor], cfg: &DistillConfig) -> Result<Tensor> {
    if student.len() != clean.len() || clean.len() != weather.len() {
        return Err(Error::config(format!(
            "{} student stages but {} teacher stages",
            student.len(),
            clean.len()
        )));
    }
    let mut losses = Vec::with_capacity(student.len());
    let mut counts = Vec::with_capacity(student.len());
    for ((maps, c), w) in student.iter().zip(clean).zip(weather) {
        let maps: &[Tensor] = if cfg.match_all_blocks {
            maps
        } else {
            maps.last().map(std::slice::from_ref).unwrap_or(&[])
        };
        let first = maps
            .first()
            .ok_or_else(|| Error::shape("student stage has no residual maps"))?;
        let (_, sc, sh, sw) = first.dims4()?;
        let (_, tc, _, _) = c.dims4()?;
        let k = matched_channels(sc, tc);
        let prep = |t: &Tensor| -> Result<Tensor> { channel_match(&resize_match(&t.detach(), sh, sw)?, k) };
        let diff = (prep(c)? - prep(w)?)?;
        let target = if cfg.normalize { standardize(&diff)? } else { diff };
        let pooled = maps.iter().map(|s| channel_match(s, k)).collect::<Result<Vec<_>>>()?;
        losses.push(stage_distill_loss(&pooled, &target, cfg.normalize)?);
        counts.push(maps.len());
    }
    total_distill_loss(&losses, &counts, cfg.block_scaling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn identical_features_give_zero_target() {
        let x = rand((2, 3, 4, 4), 0);
        let t = residual_target(&x, &x).unwrap();
        assert!(flat(&t).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn target_is_standardized_per_channel() {
        let t = residual_target(&rand((2, 3, 5, 6), 1), &rand((2, 3, 5, 6), 2)).unwrap();
        let v = flat(&t);
        for plane in v.chunks(30) {
            let mean = plane.iter().sum::<f64>() / 30.0;
            let var = plane.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 30.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn swapping_arguments_negates_target() {
        let a = rand((1, 4, 3, 3), 3);
        let b = rand((1, 4, 3, 3), 4);
        let ab = flat(&residual_target(&a, &b).unwrap());
        let ba = flat(&residual_target(&b, &a).unwrap());
        for (x, y) in ab.iter().zip(&ba) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn target_shape_mismatch_errors() {
        assert!(residual_target(&rand((1, 2, 3, 3), 0), &rand((1, 2, 3, 4), 0)).is_err());
    }

    #[test]
    fn exact_match_contributes_nothing() {
        let clean = rand((1, 3, 4, 4), 5);
        let weather = rand((1, 3, 4, 4), 6);
        let target = residual_target(&clean, &weather).unwrap();
        let student = (&clean - &weather).unwrap();
        let l = stage_distill_loss(std::slice::from_ref(&student), &target, true).unwrap();
        assert_eq!(scalar(&l), 0.0);
        let raw = stage_distill_loss(std::slice::from_ref(&target), &target, false).unwrap();
        assert_eq!(scalar(&raw), 0.0);
        assert!(stage_distill_loss(&[], &target, true).is_err());
    }

    #[test]
    fn duplicate_residuals_double_the_loss() {
        let target = rand((1, 2, 3, 3), 7);
        let s = rand((1, 2, 3, 3), 8);
        let one = scalar(&stage_distill_loss(std::slice::from_ref(&s), &target, true).unwrap());
        let two = scalar(&stage_distill_loss(&[s.clone(), s], &target, true).unwrap());
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn stage_loss_matches_scalar_oracle() {
        let (n, c, h, w) = (2, 2, 3, 3);
        let target = rand((n, c, h, w), 9);
        let s1 = rand((n, c, h, w), 10);
        let s2 = rand((n, c, h, w), 11);
        let got = scalar(&stage_distill_loss(&[s1.clone(), s2.clone()], &target, true).unwrap());
        let tv = flat(&target);
        let mut expected = 0.0;
        for s in [&s1, &s2] {
            let sv = flat(s);
            let mut sum = 0.0;
            for plane in 0..n * c {
                let p = &sv[plane * h * w..(plane + 1) * h * w];
                let mean = p.iter().sum::<f64>() / (h * w) as f64;
                let var = p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (h * w) as f64;
                for (i, x) in p.iter().enumerate() {
                    let z = (x - mean) / (var + NORM_EPS).sqrt();
                    sum += (z - tv[plane * h * w + i]).abs();
                }
            }
            expected += sum / (n * c * h * w) as f64;
        }
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn total_scaling_cases() {
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let zero = total_distill_loss(&[t(0.0), t(0.0)], &[3, 2], BlockScaling::PerStage).unwrap();
        assert_eq!(scalar(&zero), 0.0);
        let single = total_distill_loss(&[t(2.0)], &[1], BlockScaling::PerStage).unwrap();
        assert_eq!(scalar(&single), 2.0);
        let l = 0.7;
        let got = scalar(&total_distill_loss(&[t(l), t(l), t(l), t(l)], &[3, 3, 3, 2], BlockScaling::PerStage).unwrap());
        let expected = (l / 3.0 + l / 3.0 + l / 3.0 + l / 2.0) / 4.0;
        assert!((got - expected).abs() < 1e-12);
        let global = scalar(&total_distill_loss(&[t(l), t(l), t(l), t(l)], &[3, 3, 3, 2], BlockScaling::Global).unwrap());
        assert!((global - 4.0 * l / 8.0).abs() < 1e-12);
    }

    #[test]
    fn activation_schedule() {
        let cfg = DistillConfig::default();
        assert!(!cfg.active(0));
        assert!(!cfg.active(199));
        assert!(cfg.active(200));
        let always = DistillConfig { start_epoch: 0, ..cfg };
        assert!(always.active(0));
    }

    #[test]
    fn distill_loss_handles_mismatched_shapes_and_block_selection() {
        let student = vec![
            vec![rand((2, 16, 8, 8), 20), rand((2, 16, 8, 8), 21)],
            vec![rand((2, 32, 4, 4), 22)],
        ];
        let clean = vec![rand((2, 8, 16, 16), 23), rand((2, 64, 2, 2), 24)];
        let weather = vec![rand((2, 8, 16, 16), 25), rand((2, 64, 2, 2), 26)];
        let all = distill_loss(&student, &clean, &weather, &DistillConfig::default()).unwrap();
        let last = distill_loss(
            &student,
            &clean,
            &weather,
            &DistillConfig { match_all_blocks: false, ..DistillConfig::default() },
        )
        .unwrap();
        assert!(scalar(&all) > 0.0 && scalar(&last) > 0.0);
        assert_ne!(scalar(&all), scalar(&last));
        let raw = distill_loss(
            &student,
            &clean,
            &weather,
            &DistillConfig { normalize: false, ..DistillConfig::default() },
        )
        .unwrap();
        assert_ne!(scalar(&all), scalar(&raw));
    }

    #[test]
    fn gradient_reaches_student_not_teacher() {
        let s = Var::from_tensor(&rand((1, 6, 4, 4), 30)).unwrap();
        let tc = Var::from_tensor(&rand((1, 4, 8, 8), 31)).unwrap();
        let tw = rand((1, 4, 8, 8), 32);
        let l = distill_loss(
            &[vec![s.as_tensor().clone()]],
            &[tc.as_tensor().clone()],
            &[tw],
            &DistillConfig::default(),
        )
        .unwrap();
        let g = l.backward().unwrap();
        assert!(g.get(s.as_tensor()).is_some());
        assert!(g.get(tc.as_tensor()).is_none());
    }

    #[test]
    fn align_pair_pools_to_smaller_width() {
        let (s, t) = align_pair(&rand((1, 12, 4, 4), 40), &rand((1, 5, 8, 8), 41)).unwrap();
        assert_eq!(s.dims(), &[1, 5, 4, 4]);
        assert_eq!(t.dims(), &[1, 5, 4, 4]);
    }
}
