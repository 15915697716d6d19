//! Run configuration read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, fnv64, split, synth_generate, Example, Format, SynthSpec};
use crate::decoding::Primer;
use crate::error::{Error, Result};
use crate::evaluation::{ConstrainedOptConfig, DecorationConfig, SweepConfig};
use crate::model::ModelConfig;
use crate::objectives::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training data (JSONL or CSV by extension).
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Generated instead of read when `train` is absent.
    pub synthetic: Option<SynthSpec>,
    /// Split of the single source when `valid` and `test` are absent.
    pub split: [f64; 3],
    pub split_seed: u64,
    /// Fractional digits of every property.
    pub decimals: u32,
}

/// Train, validation and test examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Splits {
    pub fn all(&self) -> Vec<Example> {
        self.train.iter().chain(&self.valid).chain(&self.test).cloned().collect()
    }
}

impl DataConfig {
    /// Reads or generates the data. A single source is split by `split`.
    pub fn load(&self) -> Result<Splits> {
        let read = |p: &PathBuf| data::load(p, Format::from_path(p));
        let source = match (&self.train, &self.synthetic) {
            (Some(p), None) => read(p)?,
            (None, Some(spec)) => synth_generate(spec)?,
            (Some(_), Some(_)) => return Err(Error::Config("set either data.train or data.synthetic, not both".into())),
            (None, None) => return Err(Error::Config("data.train or data.synthetic is required".into())),
        };
        if source.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.valid.is_none() && self.test.is_none() {
            let (train, valid, test) = split(&source, self.split, self.split_seed)?;
            return Ok(Splits { train, valid, test });
        }
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or(Ok(Vec::new()), read);
        Ok(Splits { train: source, valid: opt(&self.valid)?, test: opt(&self.test)? })
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: None, valid: None, test: None, synthetic: None, split: [0.8, 0.1, 0.1], split_seed: 0, decimals: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub primers: Vec<Primer>,
    pub mask_fraction: f64,
    pub max_span: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_width: 1, primers: Vec::new(), mask_fraction: 0.4, max_span: 7 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sweep: SweepConfig,
    pub decoration: DecorationConfig,
    pub optimization: ConstrainedOptConfig,
    /// Neighbours for the nearest-neighbour baseline.
    pub knn_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            output_dir: "runs".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig { knn_k: 25, ..Default::default() },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text`; seeds the file leaves unset take `fallback` when given.
    pub fn from_toml_with_seed(text: &str, fallback: Option<u64>) -> Result<Self> {
        let mut cfg = Self::from_toml(text)?;
        if let Some(seed) = fallback {
            let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            let set = |path: &[&str]| {
                let mut node = Some(&table);
                for key in &path[..path.len() - 1] {
                    node = node.and_then(|t| t.get(*key)).and_then(toml::Value::as_table);
                }
                node.is_some_and(|t| t.contains_key(path[path.len() - 1]))
            };
            if !set(&["trainer", "seed"]) {
                cfg.trainer.seed = seed;
            }
            if !set(&["eval", "sweep", "seed"]) {
                cfg.eval.sweep.seed = seed;
            }
            if !set(&["eval", "optimization", "seed"]) {
                cfg.eval.optimization.seed = seed;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, seed_fallback: Option<u64>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_with_seed(&text, seed_fallback)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.model.vocab_size != 0 {
            self.model.validate()?;
        }
        if self.decode.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.decode.mask_fraction) {
            return Err(Error::Config("mask_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hash of the canonical TOML form.
    pub fn hash(&self) -> u64 {
        fnv64(self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let cfg = RunConfig::from_toml("run_id = \"a\"\n[model]\nd_e = 32\n[trainer]\nsteps = 10\n").unwrap();
        assert_eq!((cfg.model.d_e, cfg.trainer.steps, cfg.trainer.alpha), (32, 10, 1.0));
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.hash(), RunConfig::from_toml(&cfg.to_toml()).unwrap().hash());
    }

    #[test]
    fn rejects_unknown_keys() {
        for text in ["colour = 1", "[model]\nlayers = 2", "[trainer.optimizer]\nmomentum = 0.9", "[eval.sweep]\nx = 1"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn loads_synthetic_splits() {
        let cfg = RunConfig::from_toml(
            "[data]\nsplit = [0.5, 0.25, 0.25]\n[data.synthetic]\nkind = \"fraction_of_a\"\nn = 40\nlen = 6\nalphabet = [\"A\", \"B\"]\n",
        )
        .unwrap();
        let s = cfg.data.load().unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (20, 10, 10));
        assert!(matches!(DataConfig::default().load(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_fallback_fills_only_unset_seeds() {
        let cfg = RunConfig::from_toml_with_seed("[trainer]\nseed = 4\n", Some(9)).unwrap();
        assert_eq!((cfg.trainer.seed, cfg.eval.sweep.seed, cfg.eval.optimization.seed), (4, 9, 9));
        assert_eq!(RunConfig::from_toml_with_seed("", None).unwrap().trainer.seed, 0);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[decode]\nbeam_width = 0").is_err());
        assert!(RunConfig::from_toml("[trainer]\nbatch_size = 0").is_err());
    }
}
