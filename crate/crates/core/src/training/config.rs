use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::neural_field::FieldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// I.i.d. uniform over `[-1, 1]³`.
    Uniform,
    /// Half of the points jittered around voxels whose frame-0 intensity
    /// exceeds [`FOREGROUND_THRESHOLD`](super::FOREGROUND_THRESHOLD).
    Foreground,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

macro_rules! keyword_enum {
    ($ty:ident { $($name:literal => $variant:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    _ => Err(format!("expected one of {}", [$($name),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $name,)+ })
            }
        }
    };
}

keyword_enum!(Sampling { "uniform" => Uniform, "foreground" => Foreground });
keyword_enum!(Precision { "f32" => F32, "f64" => F64 });

/// Every optimization hyperparameter. The key-value file format uses the
/// field names as keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub points_per_epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub omega: f64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub steps_per_frame: usize,
    pub time_encoding: bool,
    pub cycle_enabled: bool,
    pub sampling: Sampling,
    pub precision: Precision,
    /// Points per tape. Part of the numerical definition of an epoch:
    /// gradients are summed chunk by chunk in index order.
    pub chunk_size: usize,
    pub workers: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epochs: 1000,
            points_per_epoch: 5000,
            learning_rate: 3e-5,
            seed: 0,
            omega: 6.0,
            hidden_layers: 3,
            hidden_width: 256,
            steps_per_frame: 1,
            time_encoding: true,
            cycle_enabled: true,
            sampling: Sampling::Uniform,
            precision: Precision::F32,
            chunk_size: 250,
            workers: 1,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "lambda",
    "epochs",
    "points_per_epoch",
    "learning_rate",
    "seed",
    "omega",
    "hidden_layers",
    "hidden_width",
    "steps_per_frame",
    "time_encoding",
    "cycle_enabled",
    "sampling",
    "precision",
    "chunk_size",
    "workers",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, TrainingError>
where
    V::Err: fmt::Display,
{
    value.parse().map_err(|e: V::Err| TrainingError::ConfigValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl FitConfig {
    /// Assigns one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainingError> {
        let v = value.trim();
        match key {
            "lambda" => self.lambda = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "points_per_epoch" => self.points_per_epoch = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "omega" => self.omega = parse(key, v)?,
            "hidden_layers" => self.hidden_layers = parse(key, v)?,
            "hidden_width" => self.hidden_width = parse(key, v)?,
            "steps_per_frame" => self.steps_per_frame = parse(key, v)?,
            "time_encoding" => self.time_encoding = parse(key, v)?,
            "cycle_enabled" => self.cycle_enabled = parse(key, v)?,
            "sampling" => self.sampling = parse(key, v)?,
            "precision" => self.precision = parse(key, v)?,
            "chunk_size" => self.chunk_size = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            other => return Err(TrainingError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), TrainingError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TrainingError::ConfigSyntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_kv_str(text: &str) -> Result<Self, TrainingError> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as a `key = value` line, in [`CONFIG_KEYS`] order.
    pub fn to_kv_string(&self) -> String {
        let values = [
            self.lambda.to_string(),
            self.epochs.to_string(),
            self.points_per_epoch.to_string(),
            self.learning_rate.to_string(),
            self.seed.to_string(),
            self.omega.to_string(),
            self.hidden_layers.to_string(),
            self.hidden_width.to_string(),
            self.steps_per_frame.to_string(),
            self.time_encoding.to_string(),
            self.cycle_enabled.to_string(),
            self.sampling.to_string(),
            self.precision.to_string(),
            self.chunk_size.to_string(),
            self.workers.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |key: &str, reason: &str| {
            Err(TrainingError::ConfigValue {
                key: key.to_string(),
                value: String::new(),
                reason: reason.to_string(),
            })
        };
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be finite and non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.points_per_epoch == 0 {
            return bad("points_per_epoch", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return bad("omega", "must be positive");
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return bad("hidden_layers", "network needs at least one hidden layer of positive width");
        }
        if self.steps_per_frame == 0 {
            return bad("steps_per_frame", "must be at least 1");
        }
        if self.chunk_size == 0 {
            return bad("chunk_size", "must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        Ok(())
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            omega: self.omega,
            period: 1.0,
            time_encoding: self.time_encoding,
        }
    }

    /// The cycle term is part of the objective only when enabled with a
    /// positive weight.
    pub fn uses_cycle(&self) -> bool {
        self.cycle_enabled && self.lambda > 0.0
    }

    pub fn lambda_ignored(&self) -> bool {
        !self.cycle_enabled && self.lambda > 0.0
    }
}
