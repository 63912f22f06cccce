//! Run configuration: TOML documents with module sections, two built-in
//! profiles and `--section.key value` overrides.
//!
//! The `retriever`, `reranker` and `generator` sections use the published
//! hyper-parameter names as keys (including `preKturns`). Keys outside that
//! list live in `model`, `fgm`, `index`, `xaug` and a few optional extras.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fgm::FgmConfig;
use crate::generator::DEFAULT_PROMPT;
use crate::nn::{ModelDims, Pooling, TrainStep};
use crate::reranker::PairOrder;
use crate::retriever::IndexMode;
use crate::train::LoopConfig;
use crate::xaug::FilterPolicy;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid value for {key}: {message}")]
    Value { key: String, message: String },
    #[error("unknown config key {0}")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(ConfigError::Value {
                key: "profile".into(),
                message: format!("expected desk or paper, got {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub pooling: Pooling,
    /// Retriever query and passage towers share word embeddings.
    pub tie_embeddings: bool,
}

impl ModelSection {
    /// Dims with the vocabulary size left for the tokenizer to fill.
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: 0,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverSection {
    pub train_batch_size: usize,
    pub epochs: usize,
    pub max_input_length: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Recorded only; activations are never recomputed at this scale.
    pub gradient_checkpoint_segments: usize,
    pub optim: String,
    pub learning_rate: f64,
    #[serde(rename = "preKturns")]
    pub pre_k_turns: usize,
    /// Stop once training R@1 reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_train_r1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankerSection {
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub train_batch_size: usize,
    pub accumulation_steps: usize,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub max_input_length: usize,
    pub passages: usize,
    #[serde(rename = "preKturns")]
    pub pre_k_turns: usize,
    #[serde(default, skip_serializing_if = "is_default_order")]
    pub order: PairOrder,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub shared_qk_init: bool,
}

fn is_default_order(o: &PairOrder) -> bool {
    *o == PairOrder::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub accumulation_steps: usize,
    pub max_grad_norm: f64,
    pub train_batch_size: usize,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub max_input_length: usize,
    pub max_output_length: usize,
    pub beam_size: usize,
    pub passages4gen: usize,
    #[serde(rename = "preKturns")]
    pub pre_k_turns: usize,
    #[serde(default = "default_prompt", skip_serializing_if = "is_default_prompt")]
    pub prompt: String,
}

fn default_prompt() -> String {
    DEFAULT_PROMPT.to_string()
}

fn is_default_prompt(p: &String) -> bool {
    p == DEFAULT_PROMPT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexSection {
    pub mode: String,
    pub n_clusters: usize,
    pub n_probe: usize,
}

impl IndexSection {
    pub fn mode(&self) -> Result<IndexMode, ConfigError> {
        match self.mode.as_str() {
            "exact" => Ok(IndexMode::Exact),
            "approximate" => Ok(IndexMode::Approximate {
                n_clusters: self.n_clusters,
                n_probe: self.n_probe,
            }),
            other => Err(ConfigError::Value {
                key: "index.mode".into(),
                message: format!("expected exact or approximate, got {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XaugSection {
    pub max_length_tokens: usize,
    pub min_length_tokens: usize,
    pub max_length_ratio: f64,
    pub min_alpha_fraction: f64,
    /// Fraction of wrong entries in the stub lexicon.
    pub lexicon_noise: f64,
}

impl XaugSection {
    pub fn policy(&self) -> FilterPolicy {
        FilterPolicy {
            max_length_tokens: self.max_length_tokens,
            min_length_tokens: self.min_length_tokens,
            max_length_ratio: self.max_length_ratio,
            min_alpha_fraction: self.min_alpha_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelSection,
    pub fgm: FgmConfig,
    pub index: IndexSection,
    pub xaug: XaugSection,
    pub retriever: RetrieverSection,
    pub reranker: RerankerSection,
    pub generator: GeneratorSection,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 7,
            model: ModelSection {
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                d_ff: 128,
                pooling: Pooling::Mean,
                tie_embeddings: true,
            },
            fgm: FgmConfig {
                enabled: true,
                epsilon: 0.1,
                apply_every_step: true,
            },
            index: IndexSection {
                mode: "exact".into(),
                n_clusters: 16,
                n_probe: 4,
            },
            xaug: XaugSection {
                max_length_tokens: 64,
                min_length_tokens: 1,
                max_length_ratio: 2.0,
                min_alpha_fraction: 0.5,
                lexicon_noise: 0.05,
            },
            retriever: RetrieverSection {
                train_batch_size: 16,
                epochs: 50,
                max_input_length: 64,
                dropout: 0.1,
                weight_decay: 0.01,
                warmup_steps: 10,
                gradient_checkpoint_segments: 0,
                optim: "adam".into(),
                learning_rate: 1e-3,
                pre_k_turns: 2,
                early_stop_train_r1: Some(0.95),
            },
            reranker: RerankerSection {
                learning_rate: 1e-3,
                dropout: 0.1,
                epochs: 15,
                train_batch_size: 1,
                accumulation_steps: 4,
                weight_decay: 0.01,
                warmup_steps: 10,
                max_input_length: 64,
                passages: 8,
                pre_k_turns: 2,
                order: PairOrder::PassageFirst,
                pooling: Pooling::Mean,
                shared_qk_init: true,
            },
            generator: GeneratorSection {
                learning_rate: 1e-3,
                dropout: 0.1,
                epochs: 20,
                accumulation_steps: 1,
                max_grad_norm: 1.0,
                train_batch_size: 8,
                weight_decay: 0.01,
                warmup_steps: 10,
                max_input_length: 64,
                max_output_length: 16,
                beam_size: 3,
                passages4gen: 3,
                pre_k_turns: 2,
                prompt: default_prompt(),
            },
        }
    }

    /// Published hyper-parameters. Model sizes stay at desk scale; towers are
/// separate and pool the first token.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            profile: Profile::Paper,
            model: ModelSection {
                pooling: Pooling::FirstToken,
                tie_embeddings: false,
                ..desk.model.clone()
            },
            fgm: FgmConfig::default(),
            retriever: RetrieverSection {
                train_batch_size: 128,
                epochs: 50,
                max_input_length: 512,
                dropout: 0.1,
                weight_decay: 0.1,
                warmup_steps: 1000,
                gradient_checkpoint_segments: 32,
                optim: "adam".into(),
                learning_rate: 4e-5,
                pre_k_turns: 2,
                early_stop_train_r1: None,
            },
            reranker: RerankerSection {
                learning_rate: 2e-5,
                dropout: 0.1,
                epochs: 20,
                train_batch_size: 1,
                accumulation_steps: 32,
                weight_decay: 0.1,
                warmup_steps: 1000,
                max_input_length: 512,
                passages: 20,
                pre_k_turns: 2,
                order: PairOrder::PassageFirst,
                pooling: Pooling::FirstToken,
                shared_qk_init: false,
            },
            generator: GeneratorSection {
                learning_rate: 2e-4,
                dropout: 0.1,
                epochs: 20,
                accumulation_steps: 1,
                max_grad_norm: 1.0,
                train_batch_size: 1,
                weight_decay: 0.1,
                warmup_steps: 1000,
                max_input_length: 1024,
                max_output_length: 128,
                beam_size: 3,
                passages4gen: 5,
                pre_k_turns: 2,
                prompt: default_prompt(),
            },
            ..desk
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `section.key = value` overrides. Values are parsed as TOML
    /// scalars, falling back to strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut doc = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (key, raw) in overrides {
            let value = parse_scalar(raw);
            let mut parts = key.split('.').peekable();
            let mut table = &mut doc;
            loop {
                let part = parts.next().ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
                if parts.peek().is_none() {
                    table.insert(part.to_string(), value);
                    break;
                }
                table = match table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default())) {
                    toml::Value::Table(t) => t,
                    _ => return Err(ConfigError::UnknownKey(key.clone())),
                };
            }
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.model.d_model == 0 || self.model.n_heads == 0 || self.model.d_model % self.model.n_heads != 0 {
            return bad("model.n_heads", "must be positive and divide model.d_model");
        }
        if self.retriever.optim != "adam" {
            return bad("retriever.optim", "only adam is implemented");
        }
        if self.retriever.train_batch_size < 2 {
            return bad(
                "retriever.train_batch_size",
                "in-batch negatives need a batch of at least 2",
            );
        }
        for (key, v) in [
            ("retriever.dropout", self.retriever.dropout),
            ("reranker.dropout", self.reranker.dropout),
            ("generator.dropout", self.generator.dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(key, "must lie in [0, 1)");
            }
        }
        for (key, v) in [
            ("reranker.train_batch_size", self.reranker.train_batch_size),
            ("reranker.accumulation_steps", self.reranker.accumulation_steps),
            ("reranker.passages", self.reranker.passages),
            ("generator.train_batch_size", self.generator.train_batch_size),
            ("generator.accumulation_steps", self.generator.accumulation_steps),
            ("generator.beam_size", self.generator.beam_size),
            ("generator.passages4gen", self.generator.passages4gen),
            ("generator.max_output_length", self.generator.max_output_length),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        if !(self.generator.max_grad_norm > 0.0) {
            return bad("generator.max_grad_norm", "must be positive");
        }
        self.fgm
            .validate()
            .or_else(|e| bad("fgm.epsilon", &e.to_string()))?;
        self.index.mode()?;
        self.xaug
            .policy()
            .validate()
            .or_else(|e| bad("xaug", &e.to_string()))?;
        Ok(())
    }

    fn step(&self, lr: f64, wd: f64, warmup: usize, acc: usize, clip: Option<f64>, dropout: f64, seed: u64) -> TrainStep {
        TrainStep {
            learning_rate: lr,
            weight_decay: wd,
            warmup_steps: warmup,
            accumulation_steps: acc,
            max_grad_norm: clip,
            dropout,
            seed,
        }
    }

    pub fn retriever_loop(&self, seed: u64) -> LoopConfig {
        let r = &self.retriever;
        LoopConfig {
            epochs: r.epochs,
            batch_size: r.train_batch_size,
            step: self.step(r.learning_rate, r.weight_decay, r.warmup_steps, 1, None, r.dropout, seed),
            fgm: Some(self.fgm),
        }
    }

    pub fn reranker_loop(&self, seed: u64) -> LoopConfig {
        let r = &self.reranker;
        LoopConfig {
            epochs: r.epochs,
            batch_size: r.train_batch_size,
            step: self.step(
                r.learning_rate,
                r.weight_decay,
                r.warmup_steps,
                r.accumulation_steps,
                None,
                r.dropout,
                seed,
            ),
            fgm: Some(self.fgm),
        }
    }

    /// FGM is never applied to the generator.
    pub fn generator_loop(&self, seed: u64) -> LoopConfig {
        let g = &self.generator;
        LoopConfig {
            epochs: g.epochs,
            batch_size: g.train_batch_size,
            step: self.step(
                g.learning_rate,
                g.weight_decay,
                g.warmup_steps,
                g.accumulation_steps,
                Some(g.max_grad_norm),
                g.dropout,
                seed,
            ),
            fgm: None,
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::desk().to_toml().replace("[retriever]", "[retriever]\nlearning_rat = 1.0");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn overrides_parse_numbers_and_strings() {
        let cfg = RunConfig::desk()
            .with_overrides(&[
                ("retriever.learning_rate".into(), "4e-5".into()),
                ("index.mode".into(), "approximate".into()),
            ])
            .unwrap();
        assert_eq!(cfg.retriever.learning_rate, 4e-5);
        assert_eq!(cfg.index.mode, "approximate");
        assert!(RunConfig::desk().with_overrides(&[("retriever.nope".into(), "1".into())]).is_err());
        let err = RunConfig::desk()
            .with_overrides(&[("generator.beam_size".into(), "0".into())])
            .unwrap_err();
        assert!(err.to_string().contains("generator.beam_size"));
    }
}
