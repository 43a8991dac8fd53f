use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{MAX_SCALE, MIN_SCALE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub latent_channels: usize,
    pub encoder_widths: Vec<usize>,
    /// Spatial downsampling of the detail latent.
    pub downsample: usize,
    pub decoder_width: usize,
    pub decoder_blocks: usize,
    pub field_channels: usize,
    pub kernels: usize,
    pub window: usize,
    pub velocity_width: usize,
    pub discriminator_widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub hr_size: usize,
    /// Synthetic split sizes; ignored for a split backed by a manifest.
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Side of the random square crop taken from each training image.
    #[serde(default)]
    pub train_patch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
}

impl StageConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub perceptual: f64,
    pub adversarial: f64,
    pub kl: f64,
    /// Fraction of stage-1 steps with the adversarial weight held at zero.
    pub disc_warmup: f64,
    pub disc_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub ema_decay: f64,
    pub shortcut: bool,
    pub levels: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: String,
    pub seed: u64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub loss: LossConfig,
    pub flow: FlowConfig,
}

/// Upper training scale of the desk profile; its 32-pixel patches keep the
/// LR side at 8 or more.
pub const DESK_MAX_SCALE: f64 = 4.0;

pub const PROFILES: [&str; 2] = ["desk", "paper"];

impl TrainConfig {
    /// Small networks and a synthetic corpus sized for one CPU core.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            seed: 0,
            scale_min: MIN_SCALE,
            scale_max: DESK_MAX_SCALE,
            run_dir: PathBuf::from("runs/desk"),
            model: ModelConfig {
                image_channels: 3,
                latent_channels: 8,
                encoder_widths: vec![16, 32, 64],
                downsample: 8,
                decoder_width: 32,
                decoder_blocks: 2,
                field_channels: 16,
                kernels: 100,
                window: 7,
                velocity_width: 32,
                discriminator_widths: vec![16, 32, 64],
            },
            data: DataConfig {
                hr_size: 64,
                train_images: 256,
                val_images: 16,
                test_images: 24,
                seed: 1,
                train_manifest: None,
                val_manifest: None,
                test_manifest: None,
                train_patch: Some(32),
            },
            stage1: StageConfig {
                epochs: 5,
                iters_per_epoch: 1000,
                batch: 4,
                lr: 2e-3,
                warmup_steps: 100,
            },
            stage2: StageConfig {
                epochs: 5,
                iters_per_epoch: 1000,
                batch: 8,
                lr: 1e-3,
                warmup_steps: 100,
            },
            loss: LossConfig {
                perceptual: 1.0,
                adversarial: 0.5,
                kl: 1e-6,
                disc_warmup: 0.1,
                disc_lr: 1e-4,
            },
            flow: FlowConfig {
                ema_decay: 0.999,
                shortcut: true,
                levels: crate::flowcore::DEFAULT_LEVELS,
            },
        }
    }

    /// Full-size schedule; valid but far beyond a desk budget.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            profile: "paper".into(),
            scale_max: MAX_SCALE,
            run_dir: PathBuf::from("runs/paper"),
            model: ModelConfig {
                encoder_widths: vec![32, 64, 128],
                decoder_width: 64,
                decoder_blocks: 4,
                field_channels: 64,
                velocity_width: 128,
                discriminator_widths: vec![64, 128, 256],
                ..desk.model
            },
            data: DataConfig {
                hr_size: 256,
                train_images: 8000,
                val_images: 1000,
                test_images: 1000,
                train_patch: None,
                ..desk.data
            },
            stage1: StageConfig {
                epochs: 1000,
                iters_per_epoch: 1000,
                batch: 4,
                lr: 4.5e-6,
                warmup_steps: 0,
            },
            stage2: StageConfig {
                epochs: 400,
                iters_per_epoch: 1000,
                batch: 8,
                lr: 1e-5,
                warmup_steps: 1000,
            },
            loss: LossConfig {
                disc_lr: 4.5e-6,
                ..desk.loss
            },
            ..desk
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected one of {})",
                PROFILES.join(", ")
            ))),
        }
    }

    /// Parses TOML whose keys override the profile named by its top-level
    /// `profile` key (default `desk`).
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let name = match overrides.get("profile") {
            None => "desk",
            Some(toml::Value::String(s)) => s.as_str(),
            Some(v) => return Err(Error::Config(format!("`profile` must be a string, got {v}"))),
        };
        let base = toml::Table::try_from(Self::profile(name)?).map_err(|e| Error::Config(format!("{e}")))?;
        let merged = merge(base, overrides);
        let cfg: Self = merged.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(MIN_SCALE <= self.scale_min && self.scale_min <= self.scale_max) {
            return fail(format!(
                "scale range [{}, {}] must satisfy {MIN_SCALE} <= min <= max",
                self.scale_min, self.scale_max
            ));
        }
        let m = &self.model;
        let stages = m.downsample.trailing_zeros() as usize;
        if !m.downsample.is_power_of_two() || m.downsample < 2 || m.encoder_widths.len() < stages {
            return fail(format!(
                "downsample {} needs a power of two >= 2 and {stages} encoder widths",
                m.downsample
            ));
        }
        if m.window % 2 == 0 {
            return fail(format!("window {} must be odd", m.window));
        }
        if m.discriminator_widths.is_empty() {
            return fail("discriminator needs at least one width".into());
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.batch == 0 || s.epochs == 0 || s.iters_per_epoch == 0 || !(s.lr > 0.0) {
                return fail(format!("{name}: batch, epochs, iters_per_epoch and lr must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.loss.disc_warmup) {
            return fail(format!("disc_warmup {} must lie in [0, 1)", self.loss.disc_warmup));
        }
        if !(0.0..1.0).contains(&self.flow.ema_decay) {
            return fail(format!("ema_decay {} must lie in [0, 1)", self.flow.ema_decay));
        }
        let min_hr = (self.scale_max * crate::imaging::MIN_LR_SIDE as f64).ceil() as usize;
        if self.data.hr_size < min_hr {
            return fail(format!(
                "hr_size {} is too small for scale {} (need {min_hr})",
                self.data.hr_size, self.scale_max
            ));
        }
        if let Some(p) = self.data.train_patch {
            if p < min_hr || p > self.data.hr_size {
                return fail(format!(
                    "train_patch {p} must lie in [{min_hr}, {}] for scale {}",
                    self.data.hr_size, self.scale_max
                ));
            }
        }
        Ok(())
    }

    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.run_dir.join("stage1.ckpt")
    }

    pub fn stage2_checkpoint(&self) -> PathBuf {
        self.run_dir.join("model.ckpt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.run_dir.join("train.log")
    }
}

fn merge(mut base: toml::Table, overrides: toml::Table) -> toml::Table {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let inner = std::mem::take(b);
                *b = merge(inner, o);
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
