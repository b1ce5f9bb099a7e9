//! Acceptance suite. Runs every criterion sequentially and prints one
//! PASS/FAIL line per criterion. Positional arguments select criteria by
//! substring, e.g. `cargo test --test acceptance -- cutmix`.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use allweather::config::Config;
use allweather::cwp::{fuse_priors, CwpCrossAttention};
use allweather::data::{cutmix, AugmentConfig, Loader, Sample, WeatherLabel};
use allweather::distill::{distill_loss, DistillConfig};
use allweather::encoder::{spatially_adaptive_conv, KernelBank, SarFfn};
use allweather::eval::{EvalMode, EvalSummary, Restorer};
use allweather::gradcheck::{check_input_gradient, GradReport};
use allweather::image::Image;
use allweather::losses::{
    psnr, psnr_loss, PerceptualExtractor, smooth_l1, ssim, ssim_loss, text_classification_loss, total_loss,
    LossTerms, LossWeights,
};
use allweather::model::Model;
use allweather::nn::ParamStore;
use allweather::synth::{
    apply_heavy_rain, apply_raindrop, apply_snow, generate_samples, HeavyRainParams, Plane, RaindropParams, SnowParams,
    SynthSpec,
};
use allweather::teacher::WeatherClass;
use allweather::train::Trainer;

type Outcome = Result<String, String>;

struct Suite {
    filters: Vec<String>,
    failed: Vec<String>,
    ran: usize,
}

impl Suite {
    fn wants(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn record(&mut self, name: &str, outcome: Outcome) {
        self.ran += 1;
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  {name}: {detail}");
                self.failed.push(name.to_string());
            }
        }
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        if self.wants(name) {
            let outcome = f();
            self.record(name, outcome);
        }
    }
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(rand_vec(n, lo, hi, &mut rng), shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    flat(t)[0]
}

// ---------------------------------------------------------------------------
// Spatially-adaptive convolution against a per-pixel brute force.

#[allow(clippy::too_many_arguments)]
fn brute_force_sac(f: &[f64], bank: &[f64], w: &[f64], n: usize, c: usize, k: usize, h: usize, wd: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * h * wd];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..wd {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            let v = f[((b * c + ch) * h + yy as usize) * wd + xx as usize];
                            let mut kval = 0.0;
                            for j in 0..k {
                                kval += w[((b * k + j) * h + y) * wd + x] * bank[((j * c + ch) * 3 + ky) * 3 + kx];
                            }
                            acc += kval * v;
                        }
                    }
                    out[((b * c + ch) * h + y) * wd + x] = acc;
                }
            }
        }
    }
    out
}

fn sac_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let cases = 120;
    for _ in 0..cases {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=5);
        let k = rng.random_range(1..=4);
        let h = rng.random_range(1..=7);
        let w = rng.random_range(1..=7);
        let f = rand_vec(n * c * h * w, -1.0, 1.0, &mut rng);
        let bank = rand_vec(k * c * 9, -1.0, 1.0, &mut rng);
        let wm = rand_vec(n * k * h * w, 0.0, 1.0, &mut rng);
        let dev = Device::Cpu;
        let ft = Tensor::from_vec(f.clone(), (n, c, h, w), &dev).unwrap();
        let bt = KernelBank::from_tensor(Tensor::from_vec(bank.clone(), (k, c, 3, 3), &dev).unwrap()).unwrap();
        let wt = Tensor::from_vec(wm.clone(), (n, k, h, w), &dev).unwrap();
        let got = flat(&spatially_adaptive_conv(&ft, &bt, &wt).unwrap());
        let want = brute_force_sac(&f, &bank, &wm, n, c, k, h, w);
        let scale = want.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-5 && secs < 10.0,
        format!("{cases} inputs, max rel err {worst:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks.

fn gradchecks() -> Outcome {
    let start = Instant::now();
    let dev = Device::Cpu;
    let mut reports: Vec<(&str, GradReport)> = Vec::new();

    let store = ParamStore::trainable(3, DType::F64, &dev);
    let ffn = SarFfn::new(&store.root(), 4, 8, 3, true).unwrap();
    let x = rand_t(&[2, 16, 4], -1.0, 1.0, 1);
    let probe = rand_t(&[2, 16, 4], -1.0, 1.0, 2);
    let r = check_input_gradient(|t| Ok(ffn.forward(t, 4, 4)?.tokens.mul(&probe)?.sum_all()?), &x, 1e-5).unwrap();
    reports.push(("sar_ffn", r));

    let store = ParamStore::trainable(4, DType::F64, &dev);
    let attn = CwpCrossAttention::new(&store.root(), 4, 2).unwrap();
    let q = rand_t(&[2, 4, 4], -1.0, 1.0, 3);
    let fused = rand_t(&[2, 3, 4], -1.0, 1.0, 4);
    let probe = rand_t(&[2, 4, 4], -1.0, 1.0, 5);
    reports.push((
        "cwp_attention/query",
        check_input_gradient(|t| Ok(attn.forward(t, &fused)?.mul(&probe)?.sum_all()?), &q, 1e-5).unwrap(),
    ));
    reports.push((
        "cwp_attention/prior",
        check_input_gradient(|t| Ok(attn.forward(&q, t)?.mul(&probe)?.sum_all()?), &fused, 1e-5).unwrap(),
    ));

    let theta_l = rand_t(&[3, 4], -1.0, 1.0, 6);
    let theta_c = rand_t(&[2, 4], -1.0, 1.0, 7);
    let w_c = Tensor::new(&[0.4f64], &dev).unwrap();
    let probe = rand_t(&[2, 3, 4], -1.0, 1.0, 8);
    let fuse = |tl: &Tensor, tc: &Tensor, w: &Tensor| -> allweather::Result<Tensor> {
        Ok(fuse_priors(tl, Some(tc), w, 2)?.sqr()?.mul(&probe)?.sum_all()?)
    };
    reports.push(("fuse_priors/theta_l", check_input_gradient(|t| fuse(t, &theta_c, &w_c), &theta_l, 1e-5).unwrap()));
    reports.push(("fuse_priors/theta_c", check_input_gradient(|t| fuse(&theta_l, t, &w_c), &theta_c, 1e-5).unwrap()));
    reports.push(("fuse_priors/w_c", check_input_gradient(|t| fuse(&theta_l, &theta_c, t), &w_c, 1e-5).unwrap()));

    let target = rand_t(&[2, 3, 4, 4], 0.0, 1.0, 9);
    let out = rand_t(&[2, 3, 4, 4], 0.1, 0.9, 10);
    let ext = PerceptualExtractor::stub(0);
    reports.push(("smooth_l1", check_input_gradient(|t| smooth_l1(t, &target), &out, 1e-6).unwrap()));
    reports.push(("perceptual", check_input_gradient(|t| ext.loss(t, &target), &out, 1e-6).unwrap()));
    reports.push(("ssim", check_input_gradient(|t| ssim_loss(t, &target), &out, 1e-6).unwrap()));
    reports.push(("psnr", check_input_gradient(|t| psnr_loss(t, &target), &out, 1e-6).unwrap()));

    let text = rand_t(&[3, 4], -1.0, 1.0, 11);
    let labels = Tensor::from_vec(vec![0.75f64, 0.25, 0.0, 0.0, 0.0, 1.0], (2, 3), &dev).unwrap();
    let emb = rand_t(&[2, 4], -1.0, 1.0, 12);
    reports.push((
        "text",
        check_input_gradient(|t| text_classification_loss(t, &text, &labels, 10.0), &emb, 1e-6).unwrap(),
    ));

    let student = rand_t(&[2, 4, 4, 4], -1.0, 1.0, 13);
    let clean = rand_t(&[2, 4, 4, 4], -1.0, 1.0, 14);
    let weather = rand_t(&[2, 4, 4, 4], -1.0, 1.0, 15);
    let cfg = DistillConfig::default();
    reports.push((
        "distill",
        check_input_gradient(
            |t| distill_loss(&[vec![t.clone()]], std::slice::from_ref(&clean), std::slice::from_ref(&weather), &cfg),
            &student,
            1e-6,
        )
        .unwrap(),
    ));

    let secs = start.elapsed().as_secs_f64();
    let bad: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passes(1e-4) || r.max_grad == 0.0)
        .map(|(n, r)| format!("{n} ({:.2e})", r.max_rel_err))
        .collect();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    check(
        bad.is_empty() && secs < 60.0,
        format!("{} checks, worst rel err {worst:.2e}, {secs:.2}s{}", reports.len(), if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(", ")) }),
    )
}

// ---------------------------------------------------------------------------
// Compositing formulas against scalar recomputation.

fn rand_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
}

fn rand_plane(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Plane {
    Plane { height: h, width: w, data: (0..h * w).map(|_| rng.random()).collect() }
}

fn degradation_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let c = rand_image(h, w, &mut rng);
        let m = rand_plane(h, w, &mut rng);
        // Residual/streak values up to 0.5 so some sums exceed 1 and clipping is exercised.
        let r = Image::from_fn(h, w, |_, _| [rng.random::<f32>() * 0.5, rng.random::<f32>() * 0.5, rng.random::<f32>() * 0.5]);
        let t = rand_plane(h, w, &mut rng);
        let streaks: Vec<Image> = (0..2).map(|_| rand_image(h, w, &mut rng)).collect();
        let a = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let s = rand_image(h, w, &mut rng);
        let rd = apply_raindrop(&c, &RaindropParams { mask: m.clone(), residual: r.clone() }).unwrap();
        let hr = apply_heavy_rain(&c, &HeavyRainParams { transmission: t.clone(), streaks: streaks.clone(), airlight: a }).unwrap();
        let sn = apply_snow(&c, &SnowParams { mask: m.clone(), flakes: s.clone() }).unwrap();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let cv = c.get(ch, y, x) as f64;
                    let mv = m.data[i] as f64;
                    let tv = t.data[i] as f64;
                    let e_rd = ((1.0 - mv) * cv + r.get(ch, y, x) as f64).clamp(0.0, 1.0);
                    let s_sum: f64 = streaks.iter().map(|s| s.get(ch, y, x) as f64).sum();
                    let e_hr = (tv * (cv + s_sum) + (1.0 - tv) * a[ch] as f64).clamp(0.0, 1.0);
                    let e_sn = ((1.0 - mv) * cv + mv * s.get(ch, y, x) as f64).clamp(0.0, 1.0);
                    worst = worst
                        .max((rd.get(ch, y, x) as f64 - e_rd).abs())
                        .max((hr.get(ch, y, x) as f64 - e_hr).abs())
                        .max((sn.get(ch, y, x) as f64 - e_sn).abs());
                }
            }
        }
    }
    let (h, w) = (9, 7);
    let c = rand_image(h, w, &mut rng);
    let zeros = Plane { height: h, width: w, data: vec![0.0; h * w] };
    let ones = Plane { height: h, width: w, data: vec![1.0; h * w] };
    let id_rd = apply_raindrop(&c, &RaindropParams { mask: zeros.clone(), residual: Image::zeros(h, w) }).unwrap() == c;
    let id_sn = apply_snow(&c, &SnowParams { mask: zeros, flakes: rand_image(h, w, &mut rng) }).unwrap() == c;
    let id_hr = apply_heavy_rain(
        &c,
        &HeavyRainParams { transmission: ones, streaks: vec![Image::zeros(h, w), Image::zeros(h, w)], airlight: [0.9, 0.8, 0.7] },
    )
    .unwrap()
        == c;
    check(
        worst < 1e-7 && id_rd && id_sn && id_hr,
        format!("max abs err {worst:.2e}; identities raindrop={id_rd} snow={id_sn} heavy-rain={id_hr}"),
    )
}

// ---------------------------------------------------------------------------

fn loss_identities() -> Outcome {
    let dev = Device::Cpu;
    let clean = rand_t(&[2, 5, 6, 6], -1.0, 1.0, 1);
    let weather = rand_t(&[2, 5, 6, 6], -1.0, 1.0, 2);
    let student = (&clean - &weather).unwrap();
    let ld = scalar(
        &distill_loss(&[vec![student.clone(), student]], &[clean], &[weather], &DistillConfig::default()).unwrap(),
    );
    let x = rand_t(&[2, 3, 16, 16], 0.0, 1.0, 3);
    let s = scalar(&ssim(&x, &x).unwrap());
    let z = Tensor::zeros((1, 3, 8, 8), DType::F64, &dev).unwrap();
    let o = Tensor::ones((1, 3, 8, 8), DType::F64, &dev).unwrap();
    let p = scalar(&psnr(&z, &o).unwrap());
    let one = Tensor::new(1.0f64, &dev).unwrap();
    let terms = LossTerms {
        smooth_l1: one.clone(),
        perceptual: one.clone(),
        ssim: one.clone(),
        psnr: one.clone(),
        text: one.clone(),
        distill: Some(one),
    };
    let total = scalar(&total_loss(&terms, &LossWeights::default(), true).unwrap());
    check(
        ld == 0.0 && (s - 1.0).abs() < 1e-12 && p.abs() < 1e-12 && (total - 1.34).abs() <= 1e-9,
        format!("L_d={ld:e}, ssim(X,X)={s}, psnr(0,1)={p} dB, unit total={total}"),
    )
}

fn prior_invariance() -> Outcome {
    let dev = Device::Cpu;
    let mut cfg = Config::desk().model;
    cfg.encoder.blocks = vec![1, 1, 1, 1];
    let store = ParamStore::trainable(11, DType::F64, &dev);
    let model = Model::new(&store.root(), &cfg, 16).unwrap();
    let w_c: Vec<f64> = model.cwp().blocks().iter().flat_map(|b| flat(b.prior_weight())).collect();
    let x = rand_t(&[2, 3, 64, 64], 0.0, 1.0, 1);
    let a = model.forward(&x, Some(&rand_t(&[2, 16], -1.0, 1.0, 2))).unwrap();
    let b = model.forward(&x, Some(&rand_t(&[2, 16], -5.0, 5.0, 3))).unwrap();
    let theta_diff = flat(&(&a.prior.as_ref().unwrap().theta_c - &b.prior.as_ref().unwrap().theta_c).unwrap())
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = flat(&(a.output - b.output).unwrap()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    check(
        w_c.iter().all(|w| *w == 0.0) && theta_diff > 0.0 && diff <= 1e-9,
        format!("w_c all zero: {}, theta_c differs by {theta_diff:.3}, output max diff {diff:e}", w_c.iter().all(|w| *w == 0.0)),
    )
}

// ---------------------------------------------------------------------------

fn constant_sample(h: usize, value: f32, class: WeatherClass) -> Sample {
    Sample::new(Image::filled(h, h, [value; 3]), Image::filled(h, h, [value; 3]), WeatherLabel::one_hot(class)).unwrap()
}

fn cutmix_bookkeeping() -> Outcome {
    let cfg = AugmentConfig { crop: 64, ..AugmentConfig::default() };
    // Pixel-count check on directly mixed pairs with distinguishable content.
    let a = constant_sample(64, 0.25, WeatherClass::Snow);
    let b = constant_sample(64, 0.75, WeatherClass::RainHaze);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut area_ok = 0;
    let mut sums_ok = 0;
    for _ in 0..1000 {
        let (m, _) = cutmix(&a, &b, &cfg, &mut rng).unwrap();
        let pasted = m.weather.data()[..64 * 64].iter().filter(|v| **v == 0.75).count();
        let frac = pasted as f64 / (64.0 * 64.0);
        if m.label.0[WeatherClass::RainHaze.index()] == frac && m.label.0[WeatherClass::Snow.index()] == 1.0 - frac {
            area_ok += 1;
        }
        if m.label.sum() == 1.0 {
            sums_ok += 1;
        }
    }
    // Application rate and label sums through the loader.
    let samples: Vec<Sample> = (0..100)
        .map(|i| {
            let class = WeatherClass::from_index(i % 3).unwrap();
            constant_sample(80, i as f32 / 100.0, class)
        })
        .collect();
    let loader = Loader::new(samples, 8, cfg, 9).unwrap();
    let mut seen = 0usize;
    let mut mixed = 0usize;
    let mut loader_sums_ok = 0usize;
    let mut epoch = 0;
    while seen < 1000 {
        for (batch, flags) in loader.epoch_samples(epoch).unwrap() {
            for (s, f) in batch.iter().zip(flags) {
                if seen == 1000 {
                    break;
                }
                seen += 1;
                mixed += f as usize;
                loader_sums_ok += (s.label.sum() == 1.0) as usize;
            }
        }
        epoch += 1;
    }
    let rate = mixed as f64 / seen as f64;
    check(
        area_ok == 1000 && sums_ok == 1000 && loader_sums_ok == 1000 && (rate - 0.7).abs() <= 0.05,
        format!("area labels exact {area_ok}/1000, label sums exact {sums_ok}/1000 and {loader_sums_ok}/1000 (loader), mix rate {rate:.3}"),
    )
}

// ---------------------------------------------------------------------------
// Toy training.

struct ToyRun {
    summary: EvalSummary,
    ablation: EvalSummary,
    epoch_losses: Vec<f64>,
    raindrop_gain: f64,
    minutes: f64,
}

fn toy_run(cfg: Config, train: &[Sample], val: &[Sample]) -> allweather::Result<ToyRun> {
    let start = Instant::now();
    let mut t = Trainer::new(cfg, train.to_vec())?;
    let mut epoch_losses = Vec::new();
    for s in t.run()? {
        epoch_losses.push(s.mean_total);
    }
    let r = Restorer::new(t.model(), t.prior_teacher(), t.text_embeddings());
    let summary = r.evaluate(val, EvalMode::Comparison)?.summary;
    let ablation = r.evaluate(val, EvalMode::Ablation)?.summary;
    let raindrop_gain = summary.per_class.get(WeatherClass::Raindrop.name()).map_or(f64::NAN, |m| m.psnr_gain());
    Ok(ToyRun { summary, ablation, epoch_losses, raindrop_gain, minutes: start.elapsed().as_secs_f64() / 60.0 })
}

fn toy_data() -> (Vec<Sample>, Vec<Sample>) {
    let train = generate_samples(&SynthSpec { per_class: 100, size: 96, seed: 1 }).unwrap();
    let val = generate_samples(&SynthSpec { per_class: 20, size: 96, seed: 2 }).unwrap();
    (train, val)
}

fn stable(losses: &[f64]) -> bool {
    losses.iter().all(|l| l.is_finite()) && losses.last() < losses.first()
}

fn toy_training(suite: &mut Suite) {
    let names = [
        "toy training (a) PSNR gain",
        "toy training (b) text accuracy",
        "toy training (c) distillation on/off",
        "determinism",
    ];
    if !names.iter().any(|n| suite.wants(n)) {
        return;
    }
    let (train, val) = toy_data();
    let base = Config::desk();
    let run = |cfg: Config| toy_run(cfg, &train, &val).map_err(|e| e.to_string());
    let first = run(base.clone());
    match &first {
        Ok(r) => {
            let m = &r.summary.overall;
            suite.record(
                names[0],
                check(
                    m.psnr_gain() >= 3.0 && r.minutes <= 90.0,
                    format!(
                        "degraded {:.2} dB -> restored {:.2} dB (gain {:+.2} dB; raindrop {:+.2} dB), SSIM {:.3} -> {:.3}, {:.1} min",
                        m.degraded_psnr, m.restored_psnr, m.psnr_gain(), r.raindrop_gain, m.degraded_ssim, m.restored_ssim, r.minutes
                    ),
                ),
            );
            let acc = r.summary.text_accuracy.unwrap_or(0.0);
            suite.record(names[1], check(acc >= 0.8, format!("held-out accuracy {acc:.3} (stub teacher)")));
        }
        Err(e) => {
            suite.record(names[0], Err(e.clone()));
            suite.record(names[1], Err(e.clone()));
        }
    }
    if suite.wants(names[2]) {
        let mut on = base.clone();
        on.distill.start_epoch = 0;
        let mut off = base.clone();
        off.distill.start_epoch = 10_000;
        let outcome = match (run(on), run(off)) {
            (Ok(a), Ok(b)) => check(
                a.epoch_losses != b.epoch_losses && stable(&a.epoch_losses) && stable(&b.epoch_losses),
                format!(
                    "final epoch loss {:.5} (N_d=0) vs {:.5} (off); first {:.5} / {:.5}",
                    a.epoch_losses.last().unwrap(),
                    b.epoch_losses.last().unwrap(),
                    a.epoch_losses[0],
                    b.epoch_losses[0]
                ),
            ),
            (Err(e), _) | (_, Err(e)) => Err(e),
        };
        suite.record(names[2], outcome);
    }
    if suite.wants(names[3]) {
        let outcome = match (&first, run(base)) {
            (Ok(a), Ok(b)) => {
                let d = (a.summary.overall.restored_psnr - b.summary.overall.restored_psnr).abs();
                let d_raw = (a.ablation.overall.restored_psnr - b.ablation.overall.restored_psnr).abs();
                check(d <= 1e-5 && d_raw <= 1e-5, format!("final mean PSNR differs by {d:e} (quantized) / {d_raw:e} (raw)"))
            }
            (Err(e), _) => Err(e.clone()),
            (_, Err(e)) => Err(e),
        };
        suite.record(names[3], outcome);
    }
}

// ---------------------------------------------------------------------------

fn ablation_variants() -> Outcome {
    let train = generate_samples(&SynthSpec { per_class: 8, size: 64, seed: 3 }).unwrap();
    let mut base = Config::desk();
    base.train.epochs = 2;
    let variants: Vec<(&str, Box<dyn Fn(&mut Config)>)> = vec![
        ("prior teacher: vision-language", Box::new(|c| c.teacher.prior = "stub-vl".into())),
        ("prior teacher: classifier", Box::new(|c| c.teacher.prior = "stub-classifier".into())),
        ("no global prior", Box::new(|c| c.model.global_prior = false)),
        ("no SAR branch", Box::new(|c| c.model.encoder.use_sar = false)),
        ("N_d = 0", Box::new(|c| c.distill.start_epoch = 0)),
        ("N_d = 200", Box::new(|c| c.distill.start_epoch = 200)),
        ("last-block matching", Box::new(|c| {
            c.distill.start_epoch = 0;
            c.distill.match_all_blocks = false;
        })),
        ("no normalization", Box::new(|c| {
            c.distill.start_epoch = 0;
            c.distill.normalize = false;
        })),
    ];
    let mut failures = Vec::new();
    for (name, tweak) in &variants {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        let res = Trainer::new(cfg, train.clone()).and_then(|mut t| t.run());
        match res {
            Ok(s) if s.len() == 2 && s.iter().all(|e| e.mean_total.is_finite()) => {}
            Ok(_) => failures.push(format!("{name}: non-finite loss")),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} variants trained 2 epochs", variants.len())
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut suite = Suite { filters, failed: Vec::new(), ran: 0 };
    suite.run("oracle equivalence (spatially-adaptive conv)", sac_oracle);
    suite.run("gradient checks", gradchecks);
    suite.run("degradation oracles", degradation_oracles);
    suite.run("loss identities", loss_identities);
    suite.run("prior invariance at initialization", prior_invariance);
    suite.run("cut-mix bookkeeping", cutmix_bookkeeping);
    suite.run("ablation reachability", ablation_variants);
    toy_training(&mut suite);
    println!("{} criteria run, {} failed", suite.ran, suite.failed.len());
    if !suite.failed.is_empty() {
        eprintln!("failed: {}", suite.failed.join(", "));
        std::process::exit(1);
    }
}
