use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reasoning::ExtractionMode;
use crate::schedule::ScheduleProfile;
use crate::toy::ToyModelConfig;

/// Everything that determines a training run. Defaults follow the published
/// settings where they exist (step counts, learning rates, batch size, image
/// size); the loss weights default to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub image_size: u32,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub schedule_profile: ScheduleProfile,
    pub num_timesteps: usize,
    pub content_refs_per_object: usize,
    pub sample_steps: usize,
    /// Keep optimizing the identifier rows during joint fine-tuning.
    pub train_span_in_stage2: bool,
    /// Ablation switch: when false the content branch is not evaluated at all.
    pub content_loss_enabled: bool,
    pub extraction_mode: ExtractionMode,
    pub model: ToyModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 500,
            stage1_lr: 1e-6,
            stage2_steps: 2500,
            stage2_lr: 5e-5,
            batch_size: 1,
            image_size: 256,
            lambda1: 1.0,
            lambda2: 1.0,
            seed: 0,
            schedule_profile: ScheduleProfile::Linear,
            num_timesteps: 1000,
            content_refs_per_object: 4,
            sample_steps: 50,
            train_span_in_stage2: true,
            content_loss_enabled: true,
            extraction_mode: ExtractionMode::Joint,
            model: ToyModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, message: &str| {
            Err(Error::Validation {
                field: name.into(),
                message: message.into(),
            })
        };
        if self.stage1_steps == 0 {
            return field("stage1_steps", "must be >= 1");
        }
        if self.stage2_steps == 0 {
            return field("stage2_steps", "must be >= 1");
        }
        if !(self.stage1_lr > 0.0 && self.stage1_lr.is_finite()) {
            return field("stage1_lr", "must be > 0");
        }
        if !(self.stage2_lr > 0.0 && self.stage2_lr.is_finite()) {
            return field("stage2_lr", "must be > 0");
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return field("lambda1", "must be >= 0");
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return field("lambda2", "must be >= 0");
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be >= 1");
        }
        if self.image_size == 0 {
            return field("image_size", "must be >= 1");
        }
        if self.num_timesteps < 2 {
            return field("num_timesteps", "must be >= 2");
        }
        if self.content_refs_per_object == 0 {
            return field("content_refs_per_object", "must be >= 1");
        }
        if self.sample_steps == 0 {
            return field("sample_steps", "must be >= 1");
        }
        self.model.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation {
            field: "config".into(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainingConfig::default();
        assert_eq!((c.stage1_steps, c.stage1_lr), (500, 1e-6));
        assert_eq!((c.stage2_steps, c.stage2_lr), (2500, 5e-5));
        assert_eq!((c.batch_size, c.image_size), (1, 256));
        assert_eq!((c.lambda1, c.lambda2), (1.0, 1.0));
        assert_eq!(c.content_refs_per_object, 4);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = TrainingConfig {
            lambda2: 0.25,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(TrainingConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let partial = TrainingConfig::from_toml("stage1_steps = 7\n[model]\nseed = 3\n").unwrap();
        assert_eq!(partial.stage1_steps, 7);
        assert_eq!(partial.model.seed, 3);
        assert_eq!(partial.model.embed_dim, 32);
        assert!(TrainingConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn validation_names_field() {
        let c = TrainingConfig {
            lambda2: -1.0,
            ..Default::default()
        };
        match c.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "lambda2"),
            other => panic!("{other:?}"),
        }
    }
}
