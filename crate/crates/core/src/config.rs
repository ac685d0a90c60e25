//! Experiment configuration: one TOML file with every knob, validated on load and
//! identified by a content hash that is stamped into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalbench::BenchConfig;
use crate::expert::ExpertConfig;
use crate::mili::MiliConfig;
use crate::policy::{NetworkConfig, TrainConfig};
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    /// Seeds `0..seeds` make up one evaluation set.
    pub seeds: u64,
    pub budgets: Vec<usize>,
    /// Oracle datasets are disjoint pairs instead of whole label groups.
    pub oracle_pairs_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_task: 20,
            seeds: 5,
            budgets: vec![500, 1_000, 2_000, 4_000],
            oracle_pairs_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub network: NetworkConfig,
    pub pretrain: TrainConfig,
    pub bc: TrainConfig,
    pub mili: MiliConfig,
    pub eval: EvalConfig,
    pub expert: ExpertConfig,
    pub demos_per_task: usize,
    /// Not part of the content hash.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            network: NetworkConfig::default(),
            pretrain: TrainConfig::default(),
            bc: TrainConfig::default(),
            mili: MiliConfig::default(),
            eval: EvalConfig::default(),
            expert: ExpertConfig::default(),
            demos_per_task: 4,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        Ok(cfg)
    }

    /// Parses and validates. Unknown or mistyped keys are reported by dotted path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { "<root>".to_string() } else { field }, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.network.validate()?;
        self.pretrain.validate("pretrain")?;
        self.bc.validate("bc")?;
        self.mili.validate()?;
        if self.demos_per_task < 2 {
            return Err(Error::config("demos_per_task", "one-shot pairs need at least 2 demos per task"));
        }
        if self.eval.episodes_per_task == 0 {
            return Err(Error::config("eval.episodes_per_task", "must be positive"));
        }
        if self.eval.seeds == 0 {
            return Err(Error::config("eval.seeds", "must be positive"));
        }
        if self.eval.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("eval.budgets", "must be strictly increasing"));
        }
        if !(self.expert.noise_std.is_finite() && self.expert.noise_std >= 0.0) {
            return Err(Error::config("expert.noise_std", "must be non-negative"));
        }
        if !(self.expert.gain > 0.0 && self.expert.gain <= 1.0) {
            return Err(Error::config("expert.gain", "must lie in (0, 1]"));
        }
        if self.expert.max_attempts == 0 {
            return Err(Error::config("expert.max_attempts", "must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, with the output directory left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("value serializes")))
    }

    pub fn bench(&self) -> BenchConfig {
        BenchConfig {
            network: self.network,
            pretrain: self.pretrain,
            bc: self.bc,
            mili: self.mili,
            expert: self.expert,
            demos_per_task: self.demos_per_task,
            episodes_per_task: self.eval.episodes_per_task,
            budgets: self.eval.budgets.clone(),
            oracle_pairs_only: self.eval.oracle_pairs_only,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn checked_in_config_is_the_default() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn carries_the_published_constants() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.mili.alpha, 0.9);
        assert_eq!(cfg.pretrain.margin, 1.0);
        assert_eq!(cfg.demos_per_task, 4);
        assert_eq!(cfg.mili.iterations, 1);
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("[world]\nhorizon = \"long\""), "world.horizon");
        assert_eq!(field_of("[mili]\nalpah = 0.5"), "mili.alpah");
        assert_eq!(field_of("[mili]\nalpha = 2.0"), "mili.alpha");
        assert_eq!(field_of("[pretrain.adam]\nlr = -1.0"), "pretrain.adam.lr");
        assert_eq!(field_of("demos_per_task = 1"), "demos_per_task");
        assert_eq!(field_of("[eval]\nbudgets = [10, 5]"), "eval.budgets");
        assert_eq!(field_of("[world]\nvocab_size = 26"), "world.vocab_size");
    }

    #[test]
    fn hash_tracks_content_but_not_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.mili.alpha = 0.8;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
