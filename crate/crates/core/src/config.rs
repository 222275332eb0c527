//! Run configuration: one TOML-backed struct covering data preparation,
//! model shape, the noise schedule, and the optimizer.  Every field has a
//! default, and `validate` rejects inconsistent combinations before any
//! compute starts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::dit::{DiTConfig, ModelConfig};
use crate::equiattn::{EquiAttnConfig, PreprocessMode};
use crate::molgraph::Element;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Raw structure file (.sdf or .xyz) consumed by prepare.
    pub data_path: String,
    /// Directory holding the tensor cache, size histogram, and reports.
    pub cache_dir: String,
    /// Grid side: heavy-atom capacity per molecule.
    pub n_max: usize,
    /// Heavy-element vocabulary, one symbol per channel-1 column.
    pub vocab: Vec<String>,

    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub t_embed: usize,
    /// Use the residual form of the geometric front end instead of
    /// overwriting the coordinate rows.
    pub preprocess_residual: bool,

    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub ema: bool,
    pub ema_decay: f64,

    /// Train with ring-class labels and enable labeled sampling.
    pub conditional: bool,
    pub classes: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            data_path: "data/corpus.sdf".to_string(),
            cache_dir: "cache".to_string(),
            n_max: 9,
            vocab: ["C", "N", "O", "F"].map(String::from).to_vec(),
            model_dim: 128,
            depth: 6,
            heads: 4,
            patch: 3,
            t_embed: 128,
            preprocess_residual: false,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            learning_rate: 1e-3,
            steps: 5000,
            batch_size: 16,
            seed: 0,
            log_every: 100,
            checkpoint_every: 1000,
            ema: false,
            ema_decay: 0.999,
            conditional: false,
            classes: 2,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn vocab_elements(&self) -> Result<Vec<Element>, ConfigError> {
        let mut out = Vec::with_capacity(self.vocab.len());
        for s in &self.vocab {
            let e = Element::from_symbol(s)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown element '{s}'")))?;
            if e == Element::H {
                return Err(ConfigError::Invalid(
                    "hydrogen is implicit and cannot be in the vocabulary".into(),
                ));
            }
            if out.contains(&e) {
                return Err(ConfigError::Invalid(format!("duplicate element '{s}'")));
            }
            out.push(e);
        }
        if out.is_empty() {
            return Err(ConfigError::Invalid("empty element vocabulary".into()));
        }
        Ok(out)
    }

    pub fn model_config(&self) -> ModelConfig {
        let attn = EquiAttnConfig {
            c0_in: self.vocab.len(),
            ..EquiAttnConfig::default()
        };
        ModelConfig {
            attn,
            dit: DiTConfig {
                d: self.model_dim,
                depth: self.depth,
                heads: self.heads,
                patch: self.patch,
                grid: self.n_max,
                classes: self.classes,
                t_embed: self.t_embed,
            },
            mode: if self.preprocess_residual {
                PreprocessMode::Residual
            } else {
                PreprocessMode::Replace
            },
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, ConfigError> {
        make_schedule(
            ScheduleKind::Linear,
            self.t_max,
            self.beta_start,
            self.beta_end,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Full cross-field validation; called on every load.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let vocab = self.vocab_elements()?;
        if self.n_max < vocab.len().max(3) {
            return Err(ConfigError::Invalid(format!(
                "n_max {} cannot hold a {}-element vocabulary and 3 coordinates",
                self.n_max,
                vocab.len()
            )));
        }
        self.model_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule()?;
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.steps == 0 {
            return Err(ConfigError::Invalid("steps must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(ConfigError::Invalid(
                "log_every and checkpoint_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(ConfigError::Invalid("ema_decay must be in [0, 1)".into()));
        }
        if self.classes == 0 {
            return Err(ConfigError::Invalid("classes must be positive".into()));
        }
        if self.conditional && self.classes < 2 {
            return Err(ConfigError::Invalid(
                "conditional training needs at least two classes".into(),
            ));
        }
        Ok(())
    }
}
