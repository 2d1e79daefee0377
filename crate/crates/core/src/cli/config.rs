use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::charprior::SegmentMode;
use crate::degrade::DegradeConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::plates::{DatasetConfig, PlateStyle};

/// Environment variable naming the run configuration file when no
/// `--config` flag is given.
pub const CONFIG_ENV: &str = "PLATE_RESTORE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seeds weight init, batch selection and the noise draws.
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100_000,
            batch: 64,
            lr: 3e-4,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsConfig {
    /// How characters are located in the low-quality input.
    pub segmenter: SegmentMode,
}

impl Default for PriorsConfig {
    fn default() -> Self {
        PriorsConfig {
            segmenter: SegmentMode::Projection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory holding `hq/`, `lq/` and the split manifests.
    pub data_dir: PathBuf,
    /// Directory for checkpoints, traces, restored images and reports.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            run_dir: "run".into(),
        }
    }
}

/// Everything a command needs, loaded from one TOML file.
///
/// Missing keys take the defaults of the struct they belong to, so a file
/// that sets only part of a section gets that section's own defaults for
/// the rest, not those of [`RunConfig::desk`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds dataset rendering and degradation.
    pub seed: u64,
    pub plates: DatasetConfig,
    pub degrade: DegradeConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub priors: PriorsConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    /// Full-scale profile: 96x48 plates, T = 1000, 50 sampling steps,
    /// batch 64, 100k steps.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            plates: DatasetConfig {
                style: PlateStyle::large(),
                ..Default::default()
            },
            degrade: DegradeConfig::default(),
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            priors: PriorsConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small profile that trains on one machine: 64x32 plates over a
    /// 12-symbol vocabulary, T = 200, 25 sampling steps, batch 16, 2k steps.
    pub fn desk() -> Self {
        RunConfig {
            seed: 2024,
            plates: DatasetConfig {
                count: 1000,
                split: [8, 1, 1],
                style: PlateStyle {
                    vocabulary: "0123456789AB".into(),
                    ..Default::default()
                },
            },
            model: DenoiserConfig {
                base_width: 8,
                groups: 4,
                time_dim: 32,
                ..Default::default()
            },
            schedule: ScheduleConfig {
                timesteps: 200,
                beta_end: 0.1,
                sampling_steps: 25,
                ..Default::default()
            },
            train: TrainConfig {
                steps: 2000,
                batch: 16,
                checkpoint_every: 500,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(key, e.to_string().trim().replace('\n', " "))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// `explicit`, else the file named by [`CONFIG_ENV`], else the desk
    /// profile.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::desk()),
        }
    }

    /// Rejects out-of-range values, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        self.plates.validate()?;
        self.degrade.validate()?;
        self.model.validate()?;
        self.schedule.build()?;
        let style = &self.plates.style;
        if self.model.channels != style.channels {
            return Err(Error::config(
                "model.channels",
                format!(
                    "{} does not match plates.style.channels = {}",
                    self.model.channels, style.channels
                ),
            ));
        }
        self.model
            .check_input(style.width, style.height)
            .map_err(|e| Error::config("plates.style.width", format!("{e} (model.multipliers)")))?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::config("train.lr", format!("{} must be positive", t.lr)));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::config(
                "train.weight_decay",
                format!("{} must be non-negative", t.weight_decay),
            ));
        }
        Ok(())
    }
}
