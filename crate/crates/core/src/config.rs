//! Training configuration and its flat `key=value` file format.
//!
//! One assignment per line, sections as dotted prefixes (`noise.sigma=5`),
//! `#` starts a comment. Unknown keys are errors.

use std::fmt::Write as _;

use thiserror::Error;

use crate::losses::LossWeights;
use crate::model::{Activation, Architecture, ClassifierInput, EncoderConfig, NoiseConfig};
use crate::optim::AdamWConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Component switches; off means weight 0 (losses) or no noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub fair: bool,
    pub orth: bool,
    pub noise: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        fair: true,
        orth: true,
        noise: true,
    };
    pub const ALL_OFF: Toggles = Toggles {
        fair: false,
        orth: false,
        noise: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub task_reduction: usize,
    pub sens_reduction: usize,
    pub head_hidden_layers: usize,
    pub activation: Activation,
    /// Seed of the frozen encoder; kept apart from `seed` so repeats share a backbone.
    pub encoder_seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 2,
            task_reduction: 8,
            sens_reduction: 16,
            head_hidden_layers: 1,
            activation: Activation::Tanh,
            encoder_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub noise: NoiseConfig,
    pub variant: ClassifierInput,
    pub toggles: Toggles,
    pub seed: u64,
    pub eval_every: usize,
    pub model: ModelSettings,
    /// Noise draws per sample at evaluation time.
    pub draws: usize,
    pub attacker_hidden_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 256,
            epochs: 20,
            weights: LossWeights::default(),
            noise: NoiseConfig::default(),
            variant: ClassifierInput::FairNvt,
            toggles: Toggles::ALL_ON,
            seed: 0,
            eval_every: 1,
            model: ModelSettings::default(),
            draws: 1,
            attacker_hidden_layers: 1,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 27] = [
        "learning_rate",
        "adam.beta1",
        "adam.beta2",
        "adam.eps",
        "weight_decay",
        "batch_size",
        "epochs",
        "loss.beta1",
        "loss.beta2",
        "loss.beta3",
        "noise.sigma",
        "noise.clip",
        "variant",
        "toggles.fair",
        "toggles.orth",
        "toggles.noise",
        "seed",
        "eval_every",
        "model.hidden_dim",
        "model.num_layers",
        "model.task_reduction",
        "model.sens_reduction",
        "model.head_hidden_layers",
        "model.activation",
        "model.encoder_seed",
        "eval.draws",
        "attacker.hidden_layers",
    ];

    /// Assigns one of [`Self::KEYS`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "learning_rate" => self.optimizer.learning_rate = parse_num(v)?,
            "adam.beta1" => self.optimizer.beta1 = parse_num(v)?,
            "adam.beta2" => self.optimizer.beta2 = parse_num(v)?,
            "adam.eps" => self.optimizer.eps = parse_num(v)?,
            "weight_decay" => self.optimizer.weight_decay = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "loss.beta1" => self.weights.sens_ce = parse_num(v)?,
            "loss.beta2" => self.weights.orth = parse_num(v)?,
            "loss.beta3" => self.weights.fair = parse_num(v)?,
            "noise.sigma" => self.noise.sigma = parse_num(v)?,
            "noise.clip" => self.noise.clip = parse_num(v)?,
            "variant" => self.variant = v.parse().map_err(|e: crate::model::ModelError| e.to_string())?,
            "toggles.fair" => self.toggles.fair = parse_bool(v)?,
            "toggles.orth" => self.toggles.orth = parse_bool(v)?,
            "toggles.noise" => self.toggles.noise = parse_bool(v)?,
            "seed" => self.seed = parse_num(v)?,
            "eval_every" => self.eval_every = parse_num(v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse_num(v)?,
            "model.num_layers" => self.model.num_layers = parse_num(v)?,
            "model.task_reduction" => self.model.task_reduction = parse_num(v)?,
            "model.sens_reduction" => self.model.sens_reduction = parse_num(v)?,
            "model.head_hidden_layers" => self.model.head_hidden_layers = parse_num(v)?,
            "model.activation" => {
                self.model.activation = match v {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    _ => return Err(format!("unknown activation `{v}`")),
                }
            }
            "model.encoder_seed" => self.model.encoder_seed = parse_num(v)?,
            "eval.draws" => self.draws = parse_num(v)?,
            "attacker.hidden_layers" => self.attacker_hidden_layers = parse_num(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Defaults overridden by the assignments in `text`, then validated.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError::Line { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key=value`, got `{line}`")))?;
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let o = &self.optimizer;
        let m = &self.model;
        let act = match m.activation {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("learning_rate", o.learning_rate.to_string()),
            ("adam.beta1", o.beta1.to_string()),
            ("adam.beta2", o.beta2.to_string()),
            ("adam.eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("loss.beta1", self.weights.sens_ce.to_string()),
            ("loss.beta2", self.weights.orth.to_string()),
            ("loss.beta3", self.weights.fair.to_string()),
            ("noise.sigma", self.noise.sigma.to_string()),
            ("noise.clip", self.noise.clip.to_string()),
            ("variant", self.variant.to_string()),
            ("toggles.fair", on_off(self.toggles.fair).into()),
            ("toggles.orth", on_off(self.toggles.orth).into()),
            ("toggles.noise", on_off(self.toggles.noise).into()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("model.hidden_dim", m.hidden_dim.to_string()),
            ("model.num_layers", m.num_layers.to_string()),
            ("model.task_reduction", m.task_reduction.to_string()),
            ("model.sens_reduction", m.sens_reduction.to_string()),
            ("model.head_hidden_layers", m.head_hidden_layers.to_string()),
            ("model.activation", act.into()),
            ("model.encoder_seed", m.encoder_seed.to_string()),
            ("eval.draws", self.draws.to_string()),
            ("attacker.hidden_layers", self.attacker_hidden_layers.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", o.learning_rate));
        }
        for (name, b) in [("adam.beta1", o.beta1), ("adam.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("adam.eps must be > 0 and weight_decay >= 0".into());
        }
        for (name, n) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("eval_every", self.eval_every),
            ("eval.draws", self.draws),
        ] {
            if n == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        LossWeights::new(self.weights.sens_ce, self.weights.orth, self.weights.fair)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.noise.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Loss weights after toggles. The orthogonality term is dropped when the
    /// sensitive embedding does not feed the task head.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.toggles.fair {
            w.fair = 0.0;
        }
        if !self.toggles.orth || !self.variant.uses_sensitive_embedding() {
            w.orth = 0.0;
        }
        w
    }

    pub fn effective_noise(&self) -> NoiseConfig {
        NoiseConfig {
            enabled: self.noise.enabled && self.toggles.noise,
            ..self.noise
        }
    }

    pub fn architecture(&self, input_dim: usize, task_classes: usize, sens_classes: usize) -> Architecture {
        let m = &self.model;
        Architecture {
            encoder: EncoderConfig {
                input_dim,
                hidden_dim: m.hidden_dim,
                num_layers: m.num_layers,
                activation: m.activation,
                seed: m.encoder_seed,
            },
            task_reduction: m.task_reduction,
            sens_reduction: m.sens_reduction,
            head_hidden_layers: m.head_hidden_layers,
            task_classes,
            sens_classes,
            variant: self.variant,
        }
    }
}
