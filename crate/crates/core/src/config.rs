//! Run configuration: one JSON document with every hyperparameter.
//! Unknown keys are rejected; a resolved copy travels with checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SynthConfig, FORMAT_VERSION};
use crate::finetune::FinetuneConfig;
use crate::loader::{LoaderConfig, ScoreParams};
use crate::nn::OptimizerConfig;
use crate::pretrain::PretrainConfig;
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Quantized tokens, masked-token cross-entropy and the contrastive term.
    #[default]
    VqCe,
    /// Quantized tokens without the contrastive term (α = 0).
    VqNoscl,
    /// Continuous encoder latents fed to the backbone; masked latent
    /// regression replaces masked-token classification.
    RawCont,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::VqCe => "vq_ce",
            Ablation::VqNoscl => "vq_noscl",
            Ablation::RawCont => "raw_cont",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vq_ce" => Ok(Ablation::VqCe),
            "vq_noscl" => Ok(Ablation::VqNoscl),
            "raw_cont" => Ok(Ablation::RawCont),
            other => Err(ConfigError::Invalid(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoaderSection {
    pub workers: usize,
    pub queue_capacity: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Fixed score threshold; when absent it is calibrated as a quantile
    /// of the training-patch scores.
    pub score_threshold: Option<f64>,
    pub calibration_quantile: f64,
    pub consumer_latency_ms: f64,
}

impl Default for LoaderSection {
    fn default() -> Self {
        LoaderSection {
            workers: 4,
            queue_capacity: 64,
            lambda1: 0.5,
            lambda2: 0.5,
            score_threshold: None,
            calibration_quantile: 0.3,
            consumer_latency_ms: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    /// Cluster count; defaults to the number of lithologies present.
    pub cluster_k: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seeds: vec![0, 1, 2, 3, 4],
            cluster_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub format_version: u32,
    pub seed: u64,
    pub ablation: Ablation,
    pub corpus: SynthConfig,
    pub split: SplitConfig,
    pub tokenizer: TokenizerConfig,
    pub pretrain: PretrainConfig,
    pub loader: LoaderSection,
    pub finetune: FinetuneConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalSection,
    /// Modality-dropout draws precomputed per pretraining patch.
    pub dropout_views: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            format_version: FORMAT_VERSION,
            seed: 0,
            ablation: Ablation::VqCe,
            corpus: SynthConfig::default(),
            split: SplitConfig::default(),
            tokenizer: TokenizerConfig::default(),
            pretrain: PretrainConfig::default(),
            loader: LoaderSection::default(),
            finetune: FinetuneConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalSection::default(),
            dropout_views: 2,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.format_version != FORMAT_VERSION {
            return Err(ConfigError::Invalid(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.corpus.validate().map_err(|e| inv(&e))?;
        self.tokenizer.validate().map_err(|e| inv(&e))?;
        self.pretrain.validate().map_err(|e| inv(&e))?;
        self.finetune.validate().map_err(|e| inv(&e))?;
        self.loader_config(f64::NEG_INFINITY).validate().map_err(|e| inv(&e))?;
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|&v| v < 0.0) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid("split ratios must be nonnegative and sum to 1".into()));
        }
        if !(0.0..=1.0).contains(&self.loader.calibration_quantile) {
            return Err(ConfigError::Invalid("calibration_quantile must lie in [0,1]".into()));
        }
        if self.loader.consumer_latency_ms < 0.0 {
            return Err(ConfigError::Invalid("consumer_latency_ms must be nonnegative".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(ConfigError::Invalid("eval.seeds must not be empty".into()));
        }
        if self.eval.cluster_k.is_some_and(|k| k < 2) {
            return Err(ConfigError::Invalid("eval.cluster_k must be at least 2".into()));
        }
        if self.dropout_views == 0 {
            return Err(ConfigError::Invalid("dropout_views must be at least 1".into()));
        }
        Ok(())
    }

    /// Copy with the ablation's overrides applied.
    pub fn resolved(&self) -> TrainConfig {
        let mut c = self.clone();
        if c.ablation == Ablation::VqNoscl {
            c.pretrain.alpha = 0.0;
        }
        c
    }

    pub fn loader_config(&self, threshold: f64) -> LoaderConfig {
        LoaderConfig {
            workers: self.loader.workers,
            queue_capacity: self.loader.queue_capacity,
            patch_len: self.tokenizer.patch_len,
            stride: self.tokenizer.stride,
            score: ScoreParams {
                lambda1: self.loader.lambda1,
                lambda2: self.loader.lambda2,
                score_threshold: threshold,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected_with_name() {
        let err = TrainConfig::from_json(r#"{"sed": 3}"#).unwrap_err().to_string();
        assert!(err.contains("sed"), "{err}");
        let err = TrainConfig::from_json(r#"{"pretrain": {"alpah": 0.2}}"#).unwrap_err().to_string();
        assert!(err.contains("alpah"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::from_json(r#"{"pretrain": {"temperature": 0.0}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"split": {"train": 0.5, "val": 0.1, "test": 0.1}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"loader": {"workers": 0}}"#).is_err());
    }

    #[test]
    fn ablation_overrides() {
        let c = TrainConfig {
            ablation: Ablation::VqNoscl,
            ..Default::default()
        };
        assert_eq!(c.resolved().pretrain.alpha, 0.0);
        assert_eq!(TrainConfig::default().resolved().pretrain.alpha, 0.1);
        let c = TrainConfig::from_json(r#"{"ablation": "raw_cont"}"#).unwrap();
        assert_eq!(c.ablation, Ablation::RawCont);
    }
}
