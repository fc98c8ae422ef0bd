//! Prompt-driven generation from a trained backbone, and the per-category
//! evaluation that feeds the metric report.

use image::RgbImage;

use crate::backbone::{Backbone, Conditioning};
use crate::config::TrainingConfig;
use crate::corpus::OBJECT_POOL;
use crate::embedding::expand_identifier;
use crate::error::{Error, Result};
use crate::manifest::StyleCategoryManifest;
use crate::metrics::{clip_iqa_score, clip_r_precision, pixel_hist_score, Embedder, MetricTriple, DEFAULT_BINS};
use crate::sampler::{sample, SampleOptions};
use crate::schedule::NoiseSchedule;
use crate::trainer::styled_prompt;

/// Tokenizes `prompt`, replacing every registered placeholder that occurs in
/// it with its identifier span.
pub fn prompt_token_ids<B: Backbone>(backbone: &B, prompt: &str) -> Result<Vec<usize>> {
    let present: Vec<_> = backbone
        .spans()
        .iter()
        .filter(|s| prompt.contains(&s.placeholder))
        .cloned()
        .collect();
    match present.as_slice() {
        [] => Ok(backbone.tokenizer().tokenize(prompt)),
        [span] => expand_identifier(backbone, prompt, &span.placeholder, span),
        _ => Err(Error::invalid("prompt mentions more than one style placeholder")),
    }
}

pub fn encode_prompt<B: Backbone>(backbone: &B, prompt: &str) -> Result<Conditioning> {
    backbone.encode_text(&prompt_token_ids(backbone, prompt)?)
}

pub fn generate_image<B: Backbone>(
    backbone: &B,
    prompt: &str,
    seed: u64,
    config: &TrainingConfig,
) -> Result<RgbImage> {
    let schedule = NoiseSchedule::build(config.num_timesteps, config.schedule_profile)?;
    let cond = encode_prompt(backbone, prompt)?;
    sample(
        backbone,
        &cond,
        &schedule,
        seed,
        SampleOptions {
            steps: config.sample_steps,
            image_size: config.image_size,
        },
    )
}

#[derive(Debug, Clone)]
pub struct CategoryEvaluation {
    pub metrics: MetricTriple,
    /// `(object, prompt, image)` for every generated sample.
    pub samples: Vec<(String, String, RgbImage)>,
    pub distractor_pool: Vec<String>,
}

/// Styled prompts of every other object; when the category has a single
/// object, the first few pool objects not in the category stand in.
pub fn default_distractors(objects: &[String], object: &str, placeholder: &str) -> Vec<String> {
    let others: Vec<&str> = objects.iter().map(String::as_str).filter(|o| *o != object).collect();
    let pool: Vec<&str> = if others.is_empty() {
        OBJECT_POOL
            .iter()
            .copied()
            .filter(|o| !objects.iter().any(|x| x == o))
            .take(3)
            .collect()
    } else {
        others
    };
    pool.into_iter().map(|o| styled_prompt(o, placeholder)).collect()
}

/// One styled sample per object, scored against the category's references.
pub fn evaluate_category<B: Backbone>(
    backbone: &B,
    manifest: &StyleCategoryManifest,
    embedder: &dyn Embedder,
    config: &TrainingConfig,
    iqa_pairs: &[(String, String)],
) -> Result<CategoryEvaluation> {
    let references = manifest.load_images()?;
    let mut samples = Vec::new();
    let mut hist = 0.0;
    let mut iqa = 0.0;
    let mut r_precision = 0.0;
    let mut pool = Vec::new();
    for object in &manifest.object_names {
        let prompt = styled_prompt(object, &manifest.placeholder);
        let image = generate_image(backbone, &prompt, config.seed, config)?;
        hist += pixel_hist_score(&image, &references, DEFAULT_BINS)?;
        iqa += clip_iqa_score(&image, embedder, iqa_pairs)?;
        let distractors = default_distractors(&manifest.object_names, object, &manifest.placeholder);
        r_precision += clip_r_precision(&[(image.clone(), prompt.clone())], &distractors, embedder)?;
        for d in distractors {
            if !pool.contains(&d) {
                pool.push(d);
            }
        }
        samples.push((object.clone(), prompt, image));
    }
    let k = manifest.object_names.len() as f64;
    Ok(CategoryEvaluation {
        metrics: MetricTriple {
            pixel_hist: hist / k,
            clip_r_precision: r_precision / k,
            clip_iqa: iqa / k,
        },
        samples,
        distractor_pool: pool,
    })
}
