//! The TOML run configuration.
//!
//! Every section is optional and every field has a default, so an empty file
//! is a valid configuration. Unknown keys are errors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use swiftkv_core::analysis::ModelDesc;
use swiftkv_core::distill::TrainConfig;
use swiftkv_core::servesim::{EngineConfig, HardwareModel, WorkloadSpec};
use swiftkv_core::swiftkv::TrainScope;
use swiftkv_core::{CacheConfig, ModelConfig, SwiftKvConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub swiftkv: SwiftKvSection,
    pub train: TrainSection,
    pub workload: WorkloadSpec,
    pub hardware: HardwareModel,
    pub engine: EngineSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwiftKvSection {
    /// Fraction of layers whose prefill is skipped; ignored when `cutoff` is set.
    pub fraction: f64,
    pub cutoff: Option<usize>,
    /// AcrossKV group size.
    pub group: usize,
    pub early_exit: bool,
    pub exit_threshold: f64,
    pub scope: TrainScope,
}

impl Default for SwiftKvSection {
    fn default() -> Self {
        Self { fraction: 0.5, cutoff: None, group: 1, early_exit: false, exit_threshold: 0.95, scope: TrainScope::Qkv }
    }
}

impl SwiftKvSection {
    pub fn resolve(&self, num_layers: usize) -> Result<SwiftKvConfig> {
        if !(0.0..=1.0).contains(&self.fraction) {
            bail!("swiftkv.fraction {} outside [0, 1]", self.fraction);
        }
        let mut cfg = match self.cutoff {
            Some(c) => SwiftKvConfig::new(c, self.group),
            None => SwiftKvConfig::from_fraction(num_layers, self.fraction, self.group),
        };
        cfg.early_exit = self.early_exit;
        cfg.exit_threshold = self.exit_threshold;
        cfg.validate(num_layers)?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub optim: TrainConfig,
    /// Synthetic corpus size and seed.
    pub sequences: usize,
    pub data_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { optim: TrainConfig::default(), sequences: 200, data_seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub max_batched_tokens: usize,
    /// `llama8b` or `llama70b`; ignored when `model` is given.
    pub preset: String,
    pub model: Option<ModelDesc>,
    pub cache: CacheConfig,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self { max_batched_tokens: 2048, preset: "llama8b".into(), model: None, cache: CacheConfig::default() }
    }
}

impl EngineSection {
    pub fn model_desc(&self) -> Result<ModelDesc> {
        match &self.model {
            Some(m) => Ok(m.clone()),
            None => ModelDesc::preset(&self.preset).with_context(|| format!("unknown model preset `{}`", self.preset)),
        }
    }

    pub fn build(&self, swiftkv: &SwiftKvSection) -> Result<EngineConfig> {
        let desc = self.model_desc()?;
        let swift = swiftkv.resolve(desc.num_layers)?;
        let engine = EngineConfig {
            max_batched_tokens: self.max_batched_tokens,
            model: desc,
            swiftkv: swift,
            cache: self.cache,
        };
        engine.validate()?;
        Ok(engine)
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("malformed config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_published_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.train.optim.learning_rate, 3e-4);
        assert_eq!(c.train.optim.weight_decay, 0.05);
        assert_eq!(c.train.optim.warmup_fraction, 0.05);
        assert_eq!(c.train.optim.epochs, 2);
        assert_eq!(c.train.optim.temperature, 2.0);
        assert_eq!(c.engine.max_batched_tokens, 2048);
        assert_eq!(c.workload.output_length, 256);
        assert_eq!(c.swiftkv.exit_threshold, 0.95);
        assert_eq!(c.hardware.efficiency, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nlayers = 4\n").is_err());
        assert!(toml::from_str::<RunConfig>("[bogus]\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlr = 1.0\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let text = r#"
            [model]
            num_layers = 4
            [swiftkv]
            cutoff = 2
            group = 2
            [train]
            learning_rate = 0.003
            sequences = 10
            [workload]
            arrival = { kind = "closed_loop", concurrency = 4 }
            input_length = [100, 200]
            num_requests = 8
            [hardware]
            memory_capacity = 4e10
            [engine]
            preset = "llama70b"
            cache = { quantization = "fp8_per_token" }
        "#;
        let c: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(c.model.num_layers, 4);
        assert_eq!(c.swiftkv.resolve(4).unwrap(), SwiftKvConfig::new(2, 2));
        assert_eq!(c.train.optim.learning_rate, 0.003);
        assert_eq!(c.train.sequences, 10);
        let engine = c.engine.build(&c.swiftkv).unwrap();
        assert_eq!(engine.model.num_layers, 80);
        assert_eq!(engine.swiftkv, SwiftKvConfig::new(2, 2));
        assert_eq!(engine.cache.quantization, swiftkv_core::Quantization::Fp8PerToken);
    }
}
