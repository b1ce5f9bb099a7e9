//! Declarative run configuration.
//!
//! A config file is a TOML tree. Its optional top-level `profile` key picks
//! the base (`desk` or `paper`); every other key overrides one leaf of that
//! base, addressed by its dotted path (`train.epochs`, `model.encoder.blocks`).
//! Command-line overrides use the same dotted keys. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cwp::CwpConfig;
use crate::data::AugmentConfig;
use crate::decoder::OutputMode;
use crate::distill::DistillConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::teacher::TeacherKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cwp: CwpConfig,
    /// Feed the projected teacher embedding into the prior tokens.
    pub global_prior: bool,
    pub output: OutputMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    /// Encoder supplying the global embedding and text embeddings.
    pub prior: String,
    /// Encoder supplying stage features for distillation.
    pub distill: String,
    pub seed: u64,
    pub weights_dir: Option<PathBuf>,
    /// Cache teacher outputs of evaluation images.
    pub cache: bool,
    pub cache_dir: Option<PathBuf>,
}

impl TeacherConfig {
    pub fn prior_kind(&self) -> Result<TeacherKind> {
        TeacherKind::parse(&self.prior)
    }

    pub fn distill_kind(&self) -> Result<TeacherKind> {
        TeacherKind::parse(&self.distill)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    /// Directory holding VGG16 weights for the perceptual loss; the random
    /// stub extractor is used when unset or missing.
    pub perceptual_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Learning rate halves every this many epochs.
    pub lr_halving_epochs: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub device: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub loss: LossConfig,
    pub distill: DistillConfig,
    pub augment: AugmentConfig,
    pub train: TrainSettings,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Config {
    /// Full-scale settings.
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            seed: 0,
            model: ModelConfig {
                encoder: EncoderConfig::paper(),
                cwp: CwpConfig::paper(),
                global_prior: true,
                output: OutputMode::Direct,
            },
            teacher: TeacherConfig {
                prior: "pretrained".into(),
                distill: "pretrained".into(),
                seed: 0,
                weights_dir: None,
                cache: true,
                cache_dir: None,
            },
            loss: LossConfig {
                weights: LossWeights::default(),
                perceptual_dir: None,
            },
            distill: DistillConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainSettings {
                epochs: 250,
                batch_size: 32,
                lr: 2e-4,
                beta1: 0.9,
                beta2: 0.999,
                lr_halving_epochs: 100,
                checkpoint_every: 10,
                log_every: 50,
                device: "cpu".into(),
            },
            data: DataConfig {
                train_manifest: None,
                val_manifest: None,
            },
            output_dir: PathBuf::from("runs/paper"),
        }
    }

    /// CPU-scale settings: 64x64 crops, narrow encoder, stub teachers.
    pub fn desk() -> Self {
        let paper = Self::paper();
        Self {
            profile: "desk".into(),
            model: ModelConfig {
                encoder: EncoderConfig::desk(),
                cwp: CwpConfig::desk(),
                ..paper.model
            },
            teacher: TeacherConfig {
                prior: "stub-vl".into(),
                distill: "stub-vl".into(),
                cache: false,
                ..paper.teacher
            },
            distill: DistillConfig {
                start_epoch: 24,
                ..DistillConfig::default()
            },
            augment: AugmentConfig {
                crop: 64,
                ..AugmentConfig::default()
            },
            train: TrainSettings {
                epochs: 30,
                batch_size: 8,
                lr: 2e-3,
                lr_halving_epochs: 12,
                checkpoint_every: 10,
                log_every: 10,
                ..paper.train
            },
            output_dir: PathBuf::from("runs/desk"),
            ..paper
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }

    /// Every settable dotted key.
    pub fn valid_keys() -> Vec<String> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(Self::desk()).expect("serializable"), &mut flat);
        flat.into_keys().collect()
    }

    /// Apply dotted-key overrides on top of `self`.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        let valid = Self::valid_keys();
        for (key, value) in overrides {
            if !valid.iter().any(|k| k == key) {
                return Err(Error::UnknownConfigKey { key: key.clone(), valid });
            }
            set_path(&mut tree, key, value.clone());
        }
        let cfg: Config = serde_json::from_value(tree).map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a TOML document into `(profile, overrides)` and build the config.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        let json = serde_json::to_value(&doc)?;
        let mut flat = BTreeMap::new();
        flatten("", &json, &mut flat);
        let profile = match flat.remove("profile") {
            Some(Value::String(p)) => p,
            Some(other) => return Err(Error::config(format!("profile must be a string, got {other}"))),
            None => "desk".into(),
        };
        let base = Self::profile(&profile)?;
        base.with_overrides(&flat.into_iter().collect::<Vec<_>>())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// Stable digest of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        let json = serde_json::to_vec(&serde_json::to_value(self)?)?;
        Ok(Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.cwp.validate(*self.model.encoder.channels.last().expect("validated"))?;
        self.teacher.prior_kind()?;
        self.teacher.distill_kind()?;
        self.loss.weights.validate()?;
        self.augment.validate()?;
        let multiple = self.model.encoder.required_multiple();
        if !self.augment.crop.is_multiple_of(multiple) {
            return Err(Error::config(format!(
                "augment.crop {} must be a multiple of {multiple}",
                self.augment.crop
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.lr_halving_epochs == 0 {
            return Err(Error::config("train.batch_size and train.lr_halving_epochs must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if t.device != "cpu" {
            return Err(Error::config(format!("unsupported device `{}` (only cpu is built in)", t.device)));
        }
        Ok(())
    }

    /// Learning rate for `epoch` under the halving schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.train.lr, self.train.lr_halving_epochs, epoch)
    }
}

pub fn lr_schedule(base: f64, halving: usize, epoch: usize) -> f64 {
    base * 0.5f64.powi((epoch / halving) as i32)
}

/// Parse `key=value`; the value is read as a TOML literal, falling back to a
/// bare string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{s}` is not of the form key=value")))?;
    let key = k.trim().to_string();
    let raw = v.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(t) => serde_json::to_value(&t["v"])?,
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node.get_mut(*part).expect("validated key");
    }
    node[parts[parts.len() - 1]] = value;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = Config::paper();
        assert_eq!(c.train.epochs, 250);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.lr, 2e-4);
        assert_eq!((c.train.beta1, c.train.beta2), (0.9, 0.999));
        assert_eq!(c.train.lr_halving_epochs, 100);
        assert_eq!(c.distill.start_epoch, 200);
        assert_eq!(c.distill.weight, 0.1);
        assert_eq!(c.augment.mix_prob, 0.7);
        assert_eq!(c.augment.crop, 256);
        assert_eq!(c.model.cwp.num_tokens, 48);
        c.validate().unwrap();
    }

    #[test]
    fn lr_halves_on_schedule() {
        let c = Config::paper();
        assert_eq!(c.lr_at(0), 2e-4);
        assert_eq!(c.lr_at(99), 2e-4);
        assert_eq!(c.lr_at(100), 1e-4);
        assert_eq!(c.lr_at(249), 5e-5);
    }

    #[test]
    fn desk_profile_shape() {
        let c = Config::desk();
        assert_eq!(c.augment.crop, 64);
        assert_eq!(c.model.encoder.channels, vec![16, 32, 64, 128]);
        assert_eq!(c.model.encoder.blocks, vec![2, 2, 2, 1]);
        assert_eq!(c.model.cwp.num_tokens, 8);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.epochs, 30);
        c.validate().unwrap();
    }

    #[test]
    fn toml_overrides_and_roundtrip() {
        let c = Config::from_toml_str(
            "profile = \"desk\"\nseed = 5\n[train]\nepochs = 2\n[model.encoder]\nblocks = [1, 1, 1, 1]\n[loss]\nssim = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.model.encoder.blocks, vec![1, 1, 1, 1]);
        assert_eq!(c.loss.weights.ssim, 0.5);
        let again = Config::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        match Config::from_toml_str("[train]\nepoch = 3\n") {
            Err(e @ Error::UnknownConfigKey { .. }) => {
                let msg = e.to_string();
                assert!(msg.contains("train.epoch"));
                assert!(msg.contains("train.epochs"));
                assert_eq!(e.exit_code(), 2);
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn cli_style_overrides() {
        let (k, v) = parse_override("distill.start_epoch=0").unwrap();
        let c = Config::desk().with_overrides(&[(k, v)]).unwrap();
        assert_eq!(c.distill.start_epoch, 0);
        let (k, v) = parse_override("teacher.prior=stub-classifier").unwrap();
        let c = c.with_overrides(&[(k, v)]).unwrap();
        assert_eq!(c.teacher.prior, "stub-classifier");
        let (k, v) = parse_override("teacher.weights_dir=\"/tmp/w\"").unwrap();
        let c = c.with_overrides(&[(k, v)]).unwrap();
        assert_eq!(c.teacher.weights_dir, Some(PathBuf::from("/tmp/w")));
        let bad = parse_override("train.epochs=many").unwrap();
        assert!(matches!(Config::desk().with_overrides(&[bad]), Err(Error::Config(_))));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let r = Config::desk().with_overrides(&[("augment.mix_prob".into(), Value::from(1.5))]);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = Config::desk().with_overrides(&[("teacher.prior".into(), Value::from("mae"))]);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = Config::desk().with_overrides(&[("augment.crop".into(), Value::from(48))]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn digest_tracks_content() {
        let a = Config::desk();
        let b = a.with_overrides(&[("seed".into(), Value::from(1))]).unwrap();
        assert_eq!(a.digest().unwrap(), Config::desk().digest().unwrap());
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }
}
