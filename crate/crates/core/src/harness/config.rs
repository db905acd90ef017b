use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use crate::data::{Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig, Mode};
use crate::tensor::Activation;

/// Model hyperparameters without the data-dependent fields, which are
/// filled in from the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelTemplate {
    pub architecture: Architecture,
    pub hidden: Vec<usize>,
    pub channels: Vec<usize>,
    pub temporal_kernel: usize,
    pub rank: usize,
    pub alpha: f64,
    pub activation: Activation,
    pub bias: bool,
}

impl Default for ModelTemplate {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelTemplate {
            architecture: m.architecture,
            hidden: m.hidden,
            channels: m.channels,
            temporal_kernel: m.temporal_kernel,
            rank: m.rank,
            alpha: m.alpha,
            activation: m.activation,
            bias: m.bias,
        }
    }
}

impl ModelTemplate {
    pub fn resolve(&self, spec: &SyntheticSpec, mode: Mode, seed: u64) -> ModelConfig {
        self.build(spec.feature_shape(), spec.classes, spec.subjects, mode, seed)
    }

    /// Sizes the model for the shape, classes and subjects of `data`.
    pub fn resolve_for(&self, data: &Dataset, mode: Mode, seed: u64) -> ModelConfig {
        self.build(data.shape.clone(), data.classes, data.subjects, mode, seed)
    }

    fn build(&self, input_shape: Vec<usize>, classes: usize, subjects: usize, mode: Mode, seed: u64) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            mode,
            input_shape,
            classes,
            subjects,
            hidden: self.hidden.clone(),
            channels: self.channels.clone(),
            temporal_kernel: self.temporal_kernel,
            rank: self.rank,
            alpha: self.alpha,
            activation: self.activation,
            bias: self.bias,
            seed,
        }
    }
}

/// Everything a comparison run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub benchmark: SyntheticSpec,
    pub model: ModelTemplate,
    pub train: TrainConfig,
    pub conditions: Vec<Mode>,
    /// Worker threads for independent (condition, seed) cells.
    pub jobs: usize,
    /// Trials of the held-out subject used for adapter fine-tuning.
    pub finetune_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmark: SyntheticSpec::default(),
            model: ModelTemplate::default(),
            train: TrainConfig::default(),
            conditions: Mode::ALL.to_vec(),
            jobs: 1,
            finetune_trials: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.train.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("no conditions selected".into()));
        }
        let mut seen = self.conditions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.conditions.len() {
            return Err(Error::Config("conditions contain duplicates".into()));
        }
        if self.finetune_trials == 0 {
            return Err(Error::Config("finetune_trials must be at least 1".into()));
        }
        for &mode in &self.conditions {
            crate::model::build_model(&self.model.resolve(&self.benchmark, mode, 0))?;
        }
        Ok(())
    }

    /// The benchmark as generated for one seed of the run.
    pub fn benchmark_for(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            ..self.benchmark.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_valid_models() {
        let run = RunConfig::default();
        run.validate().unwrap();
        let cfg = run.model.resolve(&run.benchmark, Mode::Lora, 9);
        assert_eq!(cfg.input_shape, vec![16]);
        assert_eq!((cfg.subjects, cfg.classes, cfg.seed), (6, 4, 9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("epoch"));
        let run: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}, "jobs": 2}"#).unwrap();
        assert_eq!((run.train.epochs, run.jobs), (3, 2));
    }

    #[test]
    fn cnn_needs_lifted_data() {
        let mut run = RunConfig::default();
        run.model.architecture = Architecture::Cnn;
        assert!(matches!(run.validate(), Err(Error::Config(_))));
        run.benchmark.output = crate::data::Output::Lifted {
            channels: 4,
            samples: 32,
        };
        run.validate().unwrap();
    }

    #[test]
    fn duplicate_conditions_rejected() {
        let run = RunConfig {
            conditions: vec![Mode::Lora, Mode::Lora],
            ..RunConfig::default()
        };
        assert!(run.validate().is_err());
    }
}
