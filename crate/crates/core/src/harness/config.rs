//! Training configuration, read from JSON or flat `key = value` text.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bilinear::{ChannelMode, PoolingActivation};
use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::optim::{OptimizerConfig, OptimizerKind};

pub const SEED_ENV: &str = "HAN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Hidden size.
    pub d: usize,
    /// Token embedding width; defaults to `d`.
    pub embedding: Option<usize>,
    /// Encoder depth.
    pub layers: usize,
    pub activation: PoolingActivation,
    pub channel: ChannelMode,
    pub slot_loss_weight: f64,
    pub label_residual: bool,

    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; off when unset.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once dev overall accuracy reaches this value.
    pub stop_at_overall: Option<f64>,

    /// CoNLL training file. A synthetic corpus is generated when unset.
    pub train: Option<PathBuf>,
    /// CoNLL dev file. The training set is evaluated when unset.
    pub dev: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub lowercase: bool,

    pub synthetic_utterances: usize,
    pub synthetic_intents: usize,
    pub synthetic_slot_types: usize,
    pub synthetic_max_len: usize,
    pub synthetic_seed: u64,

    /// Where the best checkpoint is written.
    pub checkpoint: Option<PathBuf>,
    /// Where per-epoch metrics are written as JSON lines.
    pub metrics_log: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d: 128,
            embedding: None,
            layers: 2,
            activation: PoolingActivation::Elu,
            channel: ChannelMode::PerQuery,
            slot_loss_weight: 1.0,
            label_residual: true,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            optimizer: OptimizerKind::Radam,
            grad_clip: None,
            epochs: 50,
            seed: 0,
            stop_at_overall: None,
            train: None,
            dev: None,
            word_vectors: None,
            lowercase: false,
            synthetic_utterances: 64,
            synthetic_intents: 4,
            synthetic_slot_types: 3,
            synthetic_max_len: 12,
            synthetic_seed: 0,
            checkpoint: None,
            metrics_log: None,
        }
    }
}

impl Config {
    /// Parses JSON when the text starts with `{`, otherwise `key = value` lines.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))?
        } else {
            parse_key_values(text, source)?
        };
        let config: Config = serde_json::from_value(value).map_err(|e| Error::Config(format!("{source}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file, resolving relative data paths against its directory
    /// and applying the seed override from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text, &path.display().to_string())?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.train, &mut self.dev, &mut self.word_vectors, &mut self.checkpoint, &mut self.metrics_log]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(seed) = lookup(SEED_ENV) {
            self.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.optimizer().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(t) = self.stop_at_overall {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("stop_at_overall must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.d,
            embedding: self.embedding.unwrap_or(self.d),
            layers: self.layers,
            activation: self.activation,
            channel: self.channel,
            slot_loss_weight: self.slot_loss_weight,
            label_residual: self.label_residual,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.synthetic_seed,
            utterances: self.synthetic_utterances,
            intents: self.synthetic_intents,
            slot_types: self.synthetic_slot_types,
            max_len: self.synthetic_max_len,
        }
    }
}

/// Turns `key = value` lines into a JSON object. Values that parse as JSON
/// scalars keep their type; anything else becomes a string.
fn parse_key_values(text: &str, source: &str) -> Result<serde_json::Value> {
    let mut map = serde_json::Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        let value = value.trim();
        let parsed = match serde_json::from_str::<serde_json::Value>(value) {
            Ok(v @ (serde_json::Value::Number(_) | serde_json::Value::Bool(_) | serde_json::Value::Null)) => v,
            _ => serde_json::Value::String(value.to_string()),
        };
        if map.insert(key.to_string(), parsed).is_some() {
            return Err(err(format!("duplicate key `{key}`")));
        }
    }
    Ok(serde_json::Value::Object(map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!((c.d, c.layers, c.batch_size, c.lr), (128, 2, 32, 1e-3));
        assert_eq!(c.activation, PoolingActivation::Elu);
        assert_eq!(c.optimizer, OptimizerKind::Radam);
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
        assert!(c.grad_clip.is_none() && c.stop_at_overall.is_none());
        c.validate().unwrap();
    }

    #[test]
    fn key_value_and_json_agree() {
        let kv = "# comment\nd = 32\nlayers=3\nactivation = relu\nlr = 0.01\ntrain = data/train.conll\ngrad_clip = 5\noptimizer = adam\n";
        let json = r#"{"d": 32, "layers": 3, "activation": "relu", "lr": 0.01, "train": "data/train.conll", "grad_clip": 5.0, "optimizer": "adam"}"#;
        let a = Config::parse(kv, "kv").unwrap();
        assert_eq!(a, Config::parse(json, "json").unwrap());
        assert_eq!(a.d, 32);
        assert_eq!(a.activation, PoolingActivation::Relu);
        assert_eq!(a.train.as_deref(), Some(Path::new("data/train.conll")));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in ["d = 0", "layers = 0", "lr = 0", "lr = -1", "batch_size = 0", "beta1 = 1", "activation = tanh", "unknown = 1", "d = 1\nd = 2", "novalue"] {
            assert!(Config::parse(bad, "t").is_err(), "{bad}");
        }
        match Config::parse("d = 4\n\noops", "cfg.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_override_and_relative_paths() {
        let mut c = Config::parse("seed = 3\ntrain = t.conll", "t").unwrap();
        c.apply_env(|_| None).unwrap();
        assert_eq!(c.seed, 3);
        c.apply_env(|k| (k == SEED_ENV).then(|| "17".to_string())).unwrap();
        assert_eq!(c.seed, 17);
        assert!(c.apply_env(|_| Some("x".into())).is_err());
        c.resolve_paths(Path::new("/base"));
        assert_eq!(c.train.as_deref(), Some(Path::new("/base/t.conll")));
    }
}
