use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::encoders::EncoderConfig;
use crate::error::{config_err, Error, Result};
use crate::preprocess::NeuralInput;
use crate::objectives::{DEFAULT_TAU, LAMBDA_D, LAMBDA_MMD};
use crate::synthdata::{Dataset, SplitPolicy, WindowSpec};

pub const TRAIN_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Contrastive training with swap, calcium and mix augmentations.
    Ours,
    /// Contrastive training with the generic jitter families only.
    SimclrNoSwap,
    /// Neural encoder regressing the paired pose window (MSE).
    RegressionConv,
    /// Contrastive + domain discriminators behind gradient reversal.
    Grl,
    /// Contrastive + MMD between domains.
    Mmd,
    /// Neural encoder trained on action labels.
    Supervised,
    /// Recurrent regression baseline; reserved in the schema, rejected by validation.
    RegressionGru,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ours,
        Method::SimclrNoSwap,
        Method::RegressionConv,
        Method::Grl,
        Method::Mmd,
        Method::Supervised,
        Method::RegressionGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::SimclrNoSwap => "simclr_no_swap",
            Method::RegressionConv => "regression_conv",
            Method::Grl => "grl",
            Method::Mmd => "mmd",
            Method::Supervised => "supervised",
            Method::RegressionGru => "regression_gru",
        }
    }

    pub fn is_contrastive(self) -> bool {
        matches!(self, Method::Ours | Method::SimclrNoSwap | Method::Grl | Method::Mmd)
    }

    /// Augmentations used when the config does not override them.
    pub fn default_augment(self) -> AugmentConfig {
        match self {
            Method::Ours => AugmentConfig::default(),
            _ => AugmentConfig::jitter_only(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                config_err(format!("unknown method {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` means one pass over the training set.
    pub steps_per_epoch: Option<usize>,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// `None` uses the method's preset.
    pub augment: Option<AugmentConfig>,
    /// Input dimensions are taken from the dataset; only widths matter here.
    pub encoder: EncoderConfig,
    pub window: WindowSpec,
    pub split: SplitPolicy,
    /// Epochs before the domain discriminators join the objective.
    pub da_warmup_epochs: usize,
    pub lambda_d: f64,
    pub lambda_mmd: f64,
    /// Restrict training to these domains (all when `None`).
    pub train_domains: Option<Vec<usize>>,
    pub neural_input: NeuralInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: TRAIN_SCHEMA_VERSION,
            method: Method::Ours,
            epochs: 200,
            batch_size: 128,
            steps_per_epoch: None,
            tau: DEFAULT_TAU,
            lr: 1e-4,
            weight_decay: 1e-5,
            warmup_epochs: 3,
            seed: 0,
            augment: None,
            encoder: EncoderConfig::default(),
            window: WindowSpec::default(),
            split: SplitPolicy::default(),
            da_warmup_epochs: 10,
            lambda_d: LAMBDA_D,
            lambda_mmd: LAMBDA_MMD,
            train_domains: None,
            neural_input: NeuralInput::default(),
        }
    }
}

impl TrainConfig {
    pub fn augment(&self) -> AugmentConfig {
        self.augment.clone().unwrap_or_else(|| self.method.default_augment())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != TRAIN_SCHEMA_VERSION {
            return Err(config_err(format!("unsupported train config schema_version {}", self.schema_version)));
        }
        if self.method == Method::RegressionGru {
            return Err(config_err("the recurrent regression baseline is not implemented; use regression_conv"));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(config_err("need at least one epoch and a batch of at least 2"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(config_err(format!("warm-up ({}) must be shorter than training ({})", self.warmup_epochs, self.epochs)));
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(config_err("τ and lr must be positive, weight decay non-negative"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(config_err("steps_per_epoch must be ≥ 1"));
        }
        self.augment().validate()
    }

    /// Copies the input dimensions of `ds` into the encoder config.
    pub fn resolve_encoder(&self, ds: &Dataset) -> Result<EncoderConfig> {
        let mut e = self.encoder.clone();
        e.joints = ds.config.joints;
        e.height = ds.config.height;
        e.width = ds.config.width;
        e.neural_frames = self.window.neural_frames;
        e.behavior_frames = self.window.behavior_frames;
        e.validate()?;
        Ok(e)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}
