use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use allweather::config::{parse_override, Config};
use allweather::data::Manifest;
use allweather::eval::{EvalMode, EvalReport, Restorer};
use allweather::image::Image;
use allweather::model::Model;
use allweather::nn::ParamStore;
use allweather::synth::{build_dataset, SynthSpec};
use allweather::teacher::{FeatureCache, PromptSet, Teacher};
use allweather::train::{load_teachers, Checkpoint, Trainer};
use allweather::{Error, Result};

/// Replaces the profile's default `output_dir`; the config file and `--set` take precedence.
const OUTPUT_DIR_ENV: &str = "ALLWEATHER_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "allweather", version, about = "All-in-one adverse weather image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic (clean, weather) dataset with a manifest.
    Synth {
        /// Clean source images; procedural scenes when omitted.
        #[arg(long)]
        clean_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side of procedural scenes.
        #[arg(long, default_value_t = 96)]
        size: usize,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training manifest (same as `--set data.train_manifest=...`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one or more manifests.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, default_value = "comparison")]
        mode: String,
        /// Directory for the per-image CSV files and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Restore a single image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Dump mixing-weight maps and residual heatmaps for one image.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML config file; the desk profile when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one dotted key, e.g. `--set train.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::desk(),
        };
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if cfg.output_dir == Config::profile(&cfg.profile)?.output_dir {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        apply_overrides(cfg, &self.overrides)
    }
}

fn apply_overrides(cfg: Config, overrides: &[String]) -> Result<Config> {
    let parsed = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    cfg.with_overrides(&parsed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            clean_dir,
            out,
            per_class,
            seed,
            size,
        } => {
            let m = build_dataset(clean_dir.as_deref(), &out, &SynthSpec { per_class, size, seed })?;
            println!("wrote {} samples to {}", m.len(), out.join("manifest.jsonl").display());
            Ok(())
        }
        Command::Train {
            cfg,
            epochs,
            seed,
            manifest,
            output,
            resume,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = manifest {
                cfg.data.train_manifest = Some(m);
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
            let mut trainer = Trainer::from_config(cfg)?;
            if let Some(r) = resume {
                trainer.resume(&r)?;
            }
            for s in trainer.run()? {
                println!("epoch {:>4}  loss {:.5}  lr {:.2e}", s.epoch, s.mean_total, s.lr);
            }
            let latest = trainer.config().output_dir.join("checkpoints").join("latest.safetensors");
            if latest.exists() {
                println!("checkpoint: {}", latest.display());
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifests,
            mode,
            out,
            overrides,
        } => {
            let mode = EvalMode::parse(&mode)?;
            let loaded = Loaded::open(&checkpoint, &overrides)?;
            let cache = loaded
                .config
                .teacher
                .cache
                .then(|| FeatureCache::from_env(loaded.config.teacher.cache_dir.clone()));
            let mut restorer = Restorer::new(&loaded.model, loaded.teacher.as_ref(), &loaded.text);
            if let Some(c) = &cache {
                restorer = restorer.with_cache(c);
            }
            let mut summaries = serde_json::Map::new();
            println!("{:<24} {:>6} {:>10} {:>10} {:>10} {:>10} {:>8}", "dataset", "images", "deg_psnr", "deg_ssim", "psnr", "ssim", "text_acc");
            for path in &manifests {
                let name = dataset_name(path);
                let samples = Manifest::load(path)?.load_all()?;
                let report = restorer.evaluate(&samples, mode)?;
                print_row(&name, &report);
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir)?;
                    report.write_csv(&dir.join(format!("{name}.csv")))?;
                }
                summaries.insert(name, serde_json::to_value(&report.summary)?);
            }
            if let Some(dir) = &out {
                std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summaries)?)?;
            }
            Ok(())
        }
        Command::Infer {
            checkpoint,
            input,
            output,
            overrides,
        } => {
            let loaded = Loaded::open(&checkpoint, &overrides)?;
            let image = Image::load(&input)?;
            let r = Restorer::new(&loaded.model, loaded.teacher.as_ref(), &loaded.text).restore(&image)?;
            r.image.save_png(&output)?;
            if let Some(i) = r.predicted {
                let name = allweather::teacher::WeatherClass::from_index(i).map_or("?", |c| c.name());
                println!("predicted weather: {name}");
            }
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Inspect {
            checkpoint,
            input,
            out,
            overrides,
        } => {
            let loaded = Loaded::open(&checkpoint, &overrides)?;
            let image = Image::load(&input)?;
            let files = Restorer::new(&loaded.model, loaded.teacher.as_ref(), &loaded.text).inspect(&image, &out)?;
            println!("wrote {} images to {}", files.len(), out.display());
            Ok(())
        }
        Command::Config { cfg } => {
            print!("{}", cfg.resolve()?.to_toml()?);
            Ok(())
        }
    }
}

/// A checkpoint rebuilt for inference.
struct Loaded {
    config: Config,
    _store: ParamStore,
    model: Model,
    teacher: std::sync::Arc<dyn Teacher>,
    text: candle_core::Tensor,
}

impl Loaded {
    fn open(path: &Path, overrides: &[String]) -> Result<Self> {
        let device = candle_core::Device::Cpu;
        let mut ckpt = Checkpoint::load(path, &device)?;
        let config = apply_overrides(ckpt.config.clone(), overrides)?;
        if config.model != ckpt.config.model {
            return Err(Error::config("model settings cannot be overridden for a trained checkpoint"));
        }
        ckpt.config = config.clone();
        let (store, model) = ckpt.build_model(&device)?;
        let (teacher, _) = load_teachers(&config, &device)?;
        if teacher.spec().embed_dim != ckpt.meta.teacher_dim {
            return Err(Error::config(format!(
                "prior teacher `{}` has embedding size {}, the checkpoint expects {}",
                teacher.name(),
                teacher.spec().embed_dim,
                ckpt.meta.teacher_dim
            )));
        }
        let text = teacher.text_embeddings(&PromptSet::weather())?;
        Ok(Self {
            config,
            _store: store,
            model,
            teacher,
            text,
        })
    }
}

fn dataset_name(manifest: &Path) -> String {
    manifest
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn print_row(name: &str, r: &EvalReport) {
    let m = &r.summary.overall;
    let acc = r.summary.text_accuracy.map_or("-".to_string(), |a| format!("{:.3}", a));
    println!(
        "{:<24} {:>6} {:>10.3} {:>10.4} {:>10.3} {:>10.4} {:>8}",
        name, m.count, m.degraded_psnr, m.degraded_ssim, m.restored_psnr, m.restored_ssim, acc
    );
}
