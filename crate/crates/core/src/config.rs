//! Run configuration and training variants.

use crate::data::SynthConfig;
use crate::decoder::ModelDims;
use crate::maskops::{NoiseKind, NoiseSpec};
use crate::matching::{LossMode, LossWeights};
use crate::mp::MpConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "mp-first-layer")]
    MpFirstLayer,
    #[serde(rename = "mp-first-3")]
    MpFirst3,
    #[serde(rename = "mp-all-layers")]
    MpAllLayers,
    #[serde(rename = "mp-all+noises")]
    MpAllNoises,
    #[serde(rename = "naive-fixed-matching")]
    NaiveFixedMatching,
    #[serde(rename = "naive-aux-loss")]
    NaiveAuxLoss,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::MpFirstLayer,
        Variant::MpFirst3,
        Variant::MpAllLayers,
        Variant::MpAllNoises,
        Variant::NaiveFixedMatching,
        Variant::NaiveAuxLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MpFirstLayer => "mp-first-layer",
            Variant::MpFirst3 => "mp-first-3",
            Variant::MpAllLayers => "mp-all-layers",
            Variant::MpAllNoises => "mp-all+noises",
            Variant::NaiveFixedMatching => "naive-fixed-matching",
            Variant::NaiveAuxLoss => "naive-aux-loss",
        }
    }

    pub fn uses_mp(self) -> bool {
        matches!(
            self,
            Variant::MpFirstLayer | Variant::MpFirst3 | Variant::MpAllLayers | Variant::MpAllNoises
        )
    }

    pub fn loss_mode(self) -> LossMode {
        match self {
            Variant::NaiveFixedMatching => LossMode::FixedLastLayer,
            Variant::NaiveAuxLoss => LossMode::ConsistencyAux,
            _ => LossMode::PerLayer,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| err("variant", format!("unknown variant `{s}`")))
    }
}

/// MP settings as written in a config file. Layers and the noise switch
/// come from the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpSettings {
    pub enabled: Option<bool>,
    pub num_queries: usize,
    pub label_flip_ratio: f64,
    pub noise: NoiseSpec,
}

impl Default for MpSettings {
    fn default() -> Self {
        let d = MpConfig::default();
        Self {
            enabled: None,
            num_queries: d.num_queries,
            label_flip_ratio: d.label_flip_ratio,
            noise: d.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps at which the learning rate is multiplied by `decay_factor`.
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub log_every: usize,
    /// Trailing fraction of the dataset held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            decay_steps: vec![900, 950],
            decay_factor: 0.1,
            log_every: 10,
            eval_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset file; when absent the dataset is generated from `synth`.
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelDims,
    pub loss: LossWeights,
    pub mp: MpSettings,
    pub train: TrainSettings,
    pub variant: Variant,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| err("config", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config with the output directory cleared,
    /// hex encoded.
    pub fn hash(&self) -> String {
        let c = RunConfig {
            out: None,
            ..self.clone()
        };
        hex(&Sha256::digest(c.to_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        if t.steps == 0 {
            return Err(err("train.steps", "must be at least 1"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(err("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(err("train.beta1", "betas must lie in [0, 1)"));
        }
        if !(t.eps > 0.0) || !(t.weight_decay >= 0.0) || !(t.decay_factor > 0.0) {
            return Err(err("train.eps", "eps and decay_factor must be positive, weight_decay >= 0"));
        }
        if t.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(err("train.decay_steps", "must be strictly increasing"));
        }
        if t.log_every == 0 {
            return Err(err("train.log_every", "must be at least 1"));
        }
        if !(t.eval_fraction > 0.0 && t.eval_fraction < 1.0) {
            return Err(err("train.eval_fraction", "must lie in (0, 1)"));
        }
        let m = &self.model;
        if m.num_queries == 0 || m.num_layers == 0 || m.dim == 0 || m.ffn_dim == 0 {
            return Err(err("model", "all dimensions must be positive"));
        }
        if m.num_categories != self.synth.num_categories {
            return Err(err("model.num_categories", "must equal synth.num_categories"));
        }
        if m.dim != self.synth.feature_dim {
            return Err(err("model.dim", "must equal synth.feature_dim"));
        }
        self.synth
            .validate()
            .map_err(|e| err("synth", e.to_string()))?;
        self.mp_config()?;
        Ok(())
    }

    /// Resolved MP configuration, or `None` when the variant trains without
    /// an MP part.
    pub fn mp_config(&self) -> Result<Option<MpConfig>, ConfigError> {
        let v = self.variant;
        match (v.uses_mp(), self.mp.enabled) {
            (true, Some(false)) => {
                return Err(err(
                    "mp.enabled",
                    format!("variant `{v}` needs the MP part but it is disabled"),
                ))
            }
            (false, Some(true)) => {
                return Err(err(
                    "mp.enabled",
                    format!("variant `{v}` trains without an MP part"),
                ))
            }
            (false, _) => return Ok(None),
            _ => {}
        }
        let l = self.model.num_layers;
        let layers = match v {
            Variant::MpFirstLayer => Some(vec![1]),
            Variant::MpFirst3 => Some((1..=3.min(l)).collect()),
            _ => None,
        };
        let (noise, flip) = if v == Variant::MpAllNoises {
            (self.mp.noise, self.mp.label_flip_ratio)
        } else {
            (
                NoiseSpec {
                    kind: NoiseKind::None,
                    ..self.mp.noise
                },
                0.0,
            )
        };
        let cfg = MpConfig {
            enabled: true,
            num_queries: self.mp.num_queries,
            label_flip_ratio: flip,
            noise,
            layers,
        };
        cfg.validate(l).map_err(|e| err("mp", e.to_string()))?;
        Ok(Some(cfg))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
