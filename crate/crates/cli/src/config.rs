//! Run configuration: TOML (or JSON) file values, overridden by flags.

use rado::baselines::IcpConfig;
use rado::evaluation::MetricMode;
use rado::neural_opt::{ModelConfig, UnrollConfig};
use rado::pointcloud::{AugmentRange, SceneSpec};
use rado::tracker::{LrSchedule, TrackerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    None,
    Icp,
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Baseline::None),
            "icp" => Ok(Baseline::Icp),
            other => Err(format!("unknown baseline '{other}' (expected none or icp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub sequences: usize,
    pub frames: usize,
    /// Forward motion per frame (meters).
    pub step: f64,
    /// Heading change per frame (radians).
    pub yaw_rate: f64,
    /// When set, each sequence draws its step uniformly from this range.
    pub step_range: Option<[f64; 2]>,
    pub yaw_rate_range: Option<[f64; 2]>,
    pub scene: SceneSpec,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            sequences: 1,
            frames: 20,
            step: 0.5,
            yaw_rate: 0.0,
            step_range: None,
            yaw_rate_range: None,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Synthesized sequences when no dataset is given.
    pub sequences: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Rate multiplier applied after each third of the epochs.
    pub decay: f64,
    pub gamma: f64,
    /// Random rigid transform applied to each training sample.
    pub augment: bool,
    pub augment_range: AugmentRange,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub model: ModelConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            sequences: 30,
            epochs: t.epochs,
            lr: t.lr.initial,
            decay: t.lr.decay,
            gamma: t.unroll.gamma,
            augment: t.augment.is_some(),
            augment_range: t.augment.unwrap_or_default(),
            clip_norm: t.clip_norm.unwrap_or(0.0),
            model: ModelConfig::default(),
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, seed: u64, tracker: &TrackerConfig) -> TrainConfig {
        let mut unroll = UnrollConfig {
            iters: tracker.train_unroll,
            gamma: self.gamma,
            ..UnrollConfig::default()
        };
        unroll.iter.ba_steps = tracker.ba_steps;
        TrainConfig {
            epochs: self.epochs,
            lr: LrSchedule::thirds(self.lr, self.decay, self.epochs),
            seed,
            unroll,
            augment: self.augment.then_some(self.augment_range),
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: MetricMode,
    /// Evaluation lengths in meters; the mode's standard set when absent.
    pub lengths: Option<Vec<f64>>,
    pub baseline: Baseline,
    pub synth: SynthSettings,
    pub tracker: TrackerConfig,
    pub icp: IcpConfig,
    pub train: TrainSettings,
}

impl RunConfig {
    /// `.json` files are read as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}
