//! Run configuration: one JSON document covering data, model and training.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::optim::{NadamConfig, PlateauConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iters: u64,
    pub batch_size: usize,
    /// Iterations between validation passes.
    pub eval_every: u64,
    /// Validation passes without a new best loss before training stops.
    pub early_stop_patience: u32,
    pub optimizer: NadamConfig,
    /// Patience counts validation passes.
    pub scheduler: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            batch_size: 5,
            eval_every: 250,
            early_stop_patience: 12,
            optimizer: NadamConfig {
                lr: 2e-3,
                ..NadamConfig::default()
            },
            scheduler: PlateauConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for mini-batch shuffling.
    pub seed: u64,
    /// Every command writes below this directory; the dataset lives in `data/`.
    pub output_dir: PathBuf,
    pub network: NetworkConfig,
    pub data: GeneratorConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("run"),
            network: NetworkConfig {
                seed: 1,
                ..NetworkConfig::default()
            },
            data: GeneratorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.data.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.network.tile != self.data.tile {
            return bad(format!(
                "network tile {:?} differs from data tile {:?}",
                self.network.tile, self.data.tile
            ));
        }
        if self.network.num_classes != self.data.num_classes {
            return bad(format!(
                "network has {} classes, data has {}",
                self.network.num_classes, self.data.num_classes
            ));
        }
        if self.network.in_channels != 3 {
            return bad("synthetic tiles have 3 input channels".into());
        }
        let t = &self.train;
        if t.max_iters == 0 || t.batch_size == 0 || t.eval_every == 0 {
            return bad("max_iters, batch_size and eval_every must be ≥ 1".into());
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        let s = &t.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) || s.min_lr < 0.0 {
            return bad(format!("invalid scheduler settings {s:?}"));
        }
        Ok(())
    }

    /// Sets the shuffle, initialisation and generator seeds at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.network.seed = seed;
        self.data.seed = seed;
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v: serde_json::Value = serde_json::to_value(RunConfig::default()).unwrap();
        v["train"]["momentum"] = 0.5.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn tile_must_match_strides() {
        let mut cfg = RunConfig::default();
        cfg.network.tile = [24, 24];
        cfg.data.tile = [24, 24];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_applies_everywhere() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(42);
        assert_eq!((cfg.seed, cfg.network.seed, cfg.data.seed), (42, 42, 42));
    }
}
