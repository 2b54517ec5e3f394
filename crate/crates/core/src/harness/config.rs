use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arena::ArenaConfig;
use crate::error::{Error, Result};
use crate::mac::MacConfig;
use crate::model::ModelConfig;

/// Step decay: `initial · decay_factor^(number of decay epochs ≤ epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-3,
            decay_factor: 0.1,
            decay_epochs: vec![15, 25],
        }
    }
}

impl LrSchedule {
    /// Rate used throughout the 0-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.initial * self.decay_factor.powi(passed as i32)
    }
}

/// Everything a training run needs. Loaded from TOML; every key is
/// optional and falls back to the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mac: MacConfig,
    /// Weight of the individual-action term in the classification loss.
    pub action_weight: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub data_ratio: f64,
    /// Directory holding `train.bin` and `test.bin`.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Evaluate on the test split every this many epochs (0: only after
    /// the last epoch).
    pub eval_every: usize,
    /// Write one record per optimizer step to the metrics log.
    pub log_steps: bool,
    pub arena: ArenaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            mac: MacConfig::default(),
            action_weight: 1.0,
            schedule: LrSchedule::default(),
            epochs: 30,
            batch_size: 8,
            seed: 0,
            data_ratio: 1.0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            eval_every: 0,
            log_steps: true,
            arena: ArenaConfig::default(),
        }
    }
}

impl RunConfig {
    /// Long schedule: 140 epochs, decays after 60 and 100, initial rate 1e-4.
    pub fn long_schedule(mut self) -> Self {
        self.epochs = 140;
        self.schedule = LrSchedule {
            initial: 1e-4,
            decay_factor: 0.1,
            decay_epochs: vec![60, 100],
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mac.validate()?;
        let s = &self.schedule;
        if !(s.initial > 0.0 && s.initial.is_finite()) || !(s.decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if s.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay epochs must be strictly increasing".into()));
        }
        if s.decay_epochs.last().is_some_and(|&d| d >= self.epochs) {
            return Err(Error::Config("decay epochs must precede the final epoch".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.data_ratio > 0.0 && self.data_ratio <= 1.0) {
            return Err(Error::Config(format!("data_ratio must lie in (0, 1], got {}", self.data_ratio)));
        }
        if !(self.action_weight >= 0.0 && self.action_weight.is_finite()) {
            return Err(Error::Config("action_weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn train_path(&self) -> PathBuf {
        self.data_dir.join("train.bin")
    }

    pub fn test_path(&self) -> PathBuf {
        self.data_dir.join("test.bin")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PathVariant, SceneFusion};

    #[test]
    fn schedule_steps_down() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(14), 1e-3);
        assert_eq!(s.lr(15), 1e-3 * 0.1);
        assert_eq!(s.lr(29), 1e-3 * 0.1f64.powi(2));
        let long = RunConfig::default().long_schedule();
        assert_eq!(long.schedule.lr(59), 1e-4);
        assert_eq!(long.schedule.lr(100), 1e-4 * 0.1f64.powi(2));
        long.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml(
            "epochs = 4\nseed = 9\n[schedule]\ndecay_epochs = [2]\n[model]\nvariant = \"TS\"\nscene_fusion = \"none\"\n",
        )
        .unwrap();
        assert_eq!(partial.epochs, 4);
        assert_eq!(partial.model.variant, PathVariant::TS);
        assert_eq!(partial.model.scene_fusion, SceneFusion::None);
        assert_eq!(partial.batch_size, 8);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "data_ratio = 0.0",
            "data_ratio = 1.5",
            "epochs = 10\n[schedule]\ndecay_epochs = [5, 5]",
            "epochs = 10\n[schedule]\ndecay_epochs = [4, 10]",
            "unknown_key = 1",
            "[mac]\nlambda_ff = -1.0\nlambda_fv = 1.0\nlambda_vv = 1.0",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
