//! Style personalization for text-to-image diffusion at desk scale.
//!
//! A vision-language model describes a set of reference images in a few
//! style words; those words seed a new multi-token identifier in the text
//! encoder's vocabulary. Training then runs in two stages: the identifier
//! rows alone, then the identifier together with the attention layers while
//! a content-preservation term keeps plain object prompts close to what the
//! untouched model produced.
//!
//! Everything runs on a small deterministic CPU backbone ([`toy::ToyBackbone`])
//! with its own reverse-mode autodiff ([`autograd`]). Other backbones can plug
//! in through [`backbone::Backbone`].

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluate;
pub mod imaging;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod reasoning;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;
pub mod toy;
pub mod trainer;

pub use backbone::{Backbone, Conditioning};
pub use checkpoint::Checkpoint;
pub use config::TrainingConfig;
pub use embedding::{FreezeMask, StyleIdentifierSpan, DEFAULT_PLACEHOLDER};
pub use error::{Error, Result};
pub use manifest::{load_manifest, StyleCategoryManifest};
pub use metrics::{Embedder, MetricReport, MetricTriple, MockEmbedder};
pub use params::ParamGroup;
pub use reasoning::{StyleKeywords, VlmClient};
pub use schedule::{NoiseSchedule, ScheduleProfile};
pub use tensor::Tensor;
pub use toy::{ToyBackbone, ToyModelConfig};
pub use trainer::{run_full_pipeline, TrainStepRecord};
