//! JSON run configuration. Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use qatip::corpus::{LengthCaps, TokenizeMode};
use qatip::model::{Arch, ModelConfig, Variant};
use qatip::train::TrainConfig;
use qatip::{BeamConfig, Error, Result, RnnConfig, TransformerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    /// When both `valid` and `test` are absent, `train` is split 80/10/10.
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: Arch,
    /// Overrides the `variant` key of the architecture section.
    pub variant: Variant,
    /// Seeds parameter initialization and shuffling.
    pub seed: u64,
    pub data: DataPaths,
    /// Existing vocabulary; when absent one is built from the training records.
    pub vocab: Option<PathBuf>,
    pub tokenize: TokenizeMode,
    pub caps: LengthCaps,
    pub min_freq: usize,
    pub max_vocab: usize,
    pub transformer: TransformerConfig,
    pub rnn: RnnConfig,
    pub train: TrainConfig,
    pub decode: BeamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Transformer,
            variant: Variant::Both,
            seed: 0,
            data: DataPaths::default(),
            vocab: None,
            tokenize: TokenizeMode::Whitespace,
            caps: LengthCaps::default(),
            min_freq: 1,
            max_vocab: 50_000,
            transformer: TransformerConfig::default(),
            rnn: RnnConfig::default(),
            train: TrainConfig::default(),
            decode: BeamConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub arch: Option<Arch>,
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
}

impl RunConfig {
    /// Parses a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.data.train);
        fix(&mut self.data.valid);
        fix(&mut self.data.test);
        fix(&mut self.vocab);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(a) = o.arch {
            self.arch = a;
        }
        if let Some(v) = o.variant {
            self.variant = v;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(lr) = o.lr {
            self.train.adam.lr = lr;
        }
        if let Some(b) = o.batch {
            self.train.batch_size = b;
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        match self.arch {
            Arch::Transformer => ModelConfig::Transformer(TransformerConfig {
                variant: self.variant,
                ..self.transformer.clone()
            }),
            Arch::Rnn => ModelConfig::Rnn(RnnConfig {
                variant: self.variant,
                ..self.rnn.clone()
            }),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        let Some(train) = &self.data.train else {
            return Err(Error::Config("data.train is required".into()));
        };
        for p in [Some(train), self.data.valid.as_ref(), self.data.test.as_ref(), self.vocab.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("path does not exist: {}", p.display())));
            }
        }
        if self.data.valid.is_some() != self.data.test.is_some() {
            return Err(Error::Config("data.valid and data.test must be given together".into()));
        }
        if self.caps.review == 0 || self.caps.query == 0 || self.caps.tip == 0 {
            return Err(Error::Config("length caps must be >= 1".into()));
        }
        if self.max_vocab < 4 {
            return Err(Error::Config("max_vocab must be >= 4".into()));
        }
        match self.model_config() {
            ModelConfig::Transformer(c) => c.validate()?,
            ModelConfig::Rnn(c) => c.validate()?,
        }
        self.train.validate()?;
        self.decode.validate()
    }
}
