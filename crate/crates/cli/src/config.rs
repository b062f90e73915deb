//! Run configuration: line-based `key=value` files plus command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cdln::model::{ModelKind, ModelSettings};
use cdln::training::{default_epochs, TrainConfig};

/// A configuration or command-line mistake; reported with exit status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

macro_rules! usage {
    ($($arg:tt)*) => { anyhow::Error::new($crate::config::Usage(format!($($arg)*))) };
}
pub(crate) use usage;

const PATH_KEYS: [&str; 9] = [
    "data",
    "out",
    "checkpoint",
    "essay",
    "original",
    "modified",
    "report",
    "buckets_out",
    "embeddings_path",
];

const NEURAL: [ModelKind; 4] = [
    ModelKind::Cdln,
    ModelKind::Rnn,
    ModelKind::Ann,
    ModelKind::Lstm,
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: Option<usize>,
    pub epochs_by_model: BTreeMap<ModelKind, usize>,
    pub dropout_rate: f64,
    pub k_folds: usize,
    /// Fraction of each prompt's essays used for training by `train`.
    pub split_ratio: f64,
    pub prompt: Option<u8>,
    pub limit: Option<usize>,
    pub bucket: usize,
    pub paths: BTreeMap<&'static str, PathBuf>,
    pub settings: ModelSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: train.seed,
            model: ModelKind::Cdln,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: None,
            epochs_by_model: BTreeMap::new(),
            dropout_rate: train.dropout_rate,
            k_folds: train.k_folds,
            split_ratio: 0.8,
            prompt: None,
            limit: None,
            bucket: 50,
            paths: BTreeMap::new(),
            settings: ModelSettings::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| usage!("invalid value '{value}' for {key}"))
}

impl RunConfig {
    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model" => self.model = value.parse().map_err(|e| usage!("{e}"))?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = Some(parse(key, value)?),
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "k_folds" => self.k_folds = parse(key, value)?,
            "split_ratio" => {
                let r: f64 = parse(key, value)?;
                if !(r > 0.0 && r <= 1.0) {
                    return Err(usage!("split_ratio must lie in (0, 1], got {r}"));
                }
                self.split_ratio = r;
            }
            "prompt" => self.prompt = Some(parse(key, value)?),
            "limit" => self.limit = Some(parse(key, value)?),
            "bucket" => {
                self.bucket = parse(key, value)?;
                if self.bucket == 0 {
                    return Err(usage!("bucket must be at least 1"));
                }
            }
            _ => {
                if let Some(name) = key.strip_prefix("epochs.") {
                    let kind: ModelKind = name.parse().map_err(|e| usage!("{e}"))?;
                    if !kind.is_neural() {
                        return Err(usage!("{key}: the svm has no epochs"));
                    }
                    self.epochs_by_model.insert(kind, parse(key, value)?);
                } else if let Some(&path_key) = PATH_KEYS.iter().find(|k| **k == key) {
                    if value.is_empty() {
                        self.paths.remove(path_key);
                    } else {
                        self.paths.insert(path_key, PathBuf::from(value));
                    }
                } else if !self.settings.set(key, value).map_err(|e| usage!("{e}"))? {
                    return Err(usage!("unknown configuration key '{key}'"));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn assign(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| usage!("expected key=value, got '{assignment}'"))?;
        self.set(key, value)
    }

    /// Applies every assignment of a config file; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line)
                .map_err(|e| usage!("{}:{}: {e}", path.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(self.model)
            .validate()
            .map_err(|e| usage!("{e}"))?;
        self.settings.validate().map_err(|e| usage!("{e}"))?;
        Ok(())
    }

    pub fn epochs_for(&self, kind: ModelKind) -> usize {
        self.epochs_by_model
            .get(&kind)
            .copied()
            .or(self.epochs)
            .unwrap_or_else(|| default_epochs(kind))
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs_for(kind),
            dropout_rate: self.dropout_rate,
            seed: self.seed,
            k_folds: self.k_folds,
            word_vectors: self.paths.get("embeddings_path").cloned(),
        }
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }

    pub fn require_path(&self, key: &str) -> Result<&Path> {
        self.path(key)
            .ok_or_else(|| usage!("missing required --{}", key.replace('_', "-")))
    }

    /// Every resolved key in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("model".into(), self.model.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("epochs".into(), self.epochs_for(self.model).to_string()),
        ];
        for kind in NEURAL {
            out.push((format!("epochs.{kind}"), self.epochs_for(kind).to_string()));
        }
        out.extend([
            ("dropout_rate".into(), self.dropout_rate.to_string()),
            ("k_folds".into(), self.k_folds.to_string()),
            ("split_ratio".into(), self.split_ratio.to_string()),
            (
                "prompt".into(),
                self.prompt.map_or("all".into(), |p| p.to_string()),
            ),
            (
                "limit".into(),
                self.limit.map_or("none".into(), |l| l.to_string()),
            ),
            ("bucket".into(), self.bucket.to_string()),
        ]);
        for key in PATH_KEYS {
            let value = self
                .path(key)
                .map_or("-".into(), |p| p.display().to_string());
            out.push((key.into(), value));
        }
        out.extend(
            self.settings
                .entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v)),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(
            &path,
            "# comment\nseed = 5\nepochs=3 # trailing\n\nchannels=7\nepochs.ann=2\n",
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.load_file(&path).unwrap();
        cfg.assign("seed=9").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.epochs_for(ModelKind::Cdln), 3);
        assert_eq!(cfg.epochs_for(ModelKind::Ann), 2);
        assert_eq!(cfg.settings.cnn.channels, 7);
    }

    #[test]
    fn defaults_per_model() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.epochs_for(ModelKind::Cdln), 15);
        assert_eq!(cfg.train_config(ModelKind::Cdln), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let mut cfg = RunConfig::default();
        for bad in [
            "colour=red",
            "seed",
            "seed=x",
            "epochs.svm=2",
            "model=bert",
            "split_ratio=0",
        ] {
            let err = cfg.assign(bad).unwrap_err();
            assert!(err.downcast_ref::<Usage>().is_some(), "{bad}: {err}");
        }
    }

    #[test]
    fn entries_name_every_key_once() {
        let entries = RunConfig::default().entries();
        let mut keys: Vec<&str> = entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(keys[0], "seed");
        let n = keys.len();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), n);
        let mut cfg = RunConfig::default();
        for (k, v) in &entries {
            if v != "-" && v != "all" && v != "none" {
                cfg.set(k, v).unwrap();
            }
        }
    }
}
