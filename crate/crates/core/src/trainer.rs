//! Two-stage style fine-tuning.
//!
//! Stage 1 optimizes only the style identifier rows under the reconstruction
//! loss on the reference images. Stage 2 adds a content branch: images the
//! untouched base model produced for each object under a style-free prompt,
//! reconstructed with the same quadratic loss, while the identifier rows and
//! every attention parameter (text encoder and denoiser) are updated.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LossTerm};
use crate::checkpoint::Checkpoint;
use crate::config::TrainingConfig;
use crate::embedding::{
    compute_keyword_embeddings, expand_identifier, register_and_initialize, stage1_freeze_mask,
    FreezeMask, StyleIdentifierSpan,
};
use crate::error::{Error, Result};
use crate::imaging::{image_to_latent, load_rgb, save_png};
use crate::manifest::StyleCategoryManifest;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamGroup;
use crate::reasoning::{KeywordCache, StyleKeywords, VlmClient};
use crate::sampler::{sample, SampleOptions};
use crate::schedule::{add_noise, total_loss, LatentSample, NoiseSchedule};
use crate::tensor::Tensor;

pub fn styled_prompt(object: &str, placeholder: &str) -> String {
    format!("an {object} with {placeholder} style")
}

pub fn unstyled_prompt(object: &str) -> String {
    format!("a photo of a {object}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    One,
    Two,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(format!("unknown stage {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    /// Global step, counted across both stages.
    pub step: usize,
    pub stage: Stage,
    pub l_ldm: f64,
    pub l_content: f64,
    pub l_total: f64,
    pub timestep_sampled: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_timestep: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ContentReferenceSet {
    pub object_name: String,
    pub images: Vec<RgbImage>,
    /// The images converted back to latents; these are the stage-2 targets.
    pub latents: Vec<Tensor>,
    pub seeds: Vec<u64>,
    pub generator_fingerprint: String,
    pub prompt_used: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheIndexEntry {
    object: String,
    seed: u64,
    prompt: String,
    image_size: u32,
    sample_steps: usize,
    num_timesteps: usize,
    schedule_profile: crate::schedule::ScheduleProfile,
}

/// On-disk cache of content references:
/// `{root}/{fingerprint}/{object}/{seed}.png` plus `{root}/{fingerprint}/index.json`.
#[derive(Debug)]
pub struct ContentReferenceCache {
    root: PathBuf,
    index_lock: Mutex<()>,
}

impl ContentReferenceCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            index_lock: Mutex::new(()),
        }
    }

    pub fn image_path(&self, fingerprint: &str, object: &str, seed: u64) -> PathBuf {
        self.root.join(fingerprint).join(object).join(format!("{seed}.png"))
    }

    fn index_path(&self, fingerprint: &str) -> PathBuf {
        self.root.join(fingerprint).join("index.json")
    }

    fn read_index(&self, fingerprint: &str) -> Result<Vec<CacheIndexEntry>> {
        let path = self.index_path(fingerprint);
        if !path.exists() {
            return Ok(Vec::new());
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn lookup(&self, fingerprint: &str, entry: &CacheIndexEntry) -> Result<Option<RgbImage>> {
        let path = self.image_path(fingerprint, &entry.object, entry.seed);
        if !path.exists() || !self.read_index(fingerprint)?.contains(entry) {
            return Ok(None);
        }
        Ok(Some(load_rgb(&path)?))
    }

    fn insert(&self, fingerprint: &str, entry: CacheIndexEntry, img: &RgbImage) -> Result<()> {
        let path = self.image_path(fingerprint, &entry.object, entry.seed);
        let tmp = path.with_extension("png.tmp");
        save_png(img, &tmp)?;
        std::fs::rename(&tmp, &path)?;
        let _guard = self.index_lock.lock().expect("cache index lock");
        let mut index = self.read_index(fingerprint)?;
        index.retain(|e| !(e.object == entry.object && e.seed == entry.seed));
        index.push(entry);
        index.sort_by(|a, b| (&a.object, a.seed).cmp(&(&b.object, b.seed)));
        let ipath = self.index_path(fingerprint);
        let itmp = ipath.with_extension("json.tmp");
        std::fs::write(&itmp, serde_json::to_vec_pretty(&index)?)?;
        std::fs::rename(itmp, ipath)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContentReferences {
    pub sets: BTreeMap<String, ContentReferenceSet>,
    /// Images actually sampled (cache misses).
    pub sampler_invocations: usize,
}

/// Samples `content_refs_per_object` images per object from the style-free
/// prompt with seeds `seed, seed + 1, ...`, reusing cached images.
pub fn generate_content_references<B: Backbone>(
    frozen_backbone: &B,
    objects: &[String],
    config: &TrainingConfig,
    cache: Option<&ContentReferenceCache>,
) -> Result<ContentReferences> {
    if objects.is_empty() {
        return Err(Error::invalid("no objects to generate content references for"));
    }
    let schedule = NoiseSchedule::build(config.num_timesteps, config.schedule_profile)?;
    let fingerprint = frozen_backbone.fingerprint();
    let options = SampleOptions {
        steps: config.sample_steps,
        image_size: config.image_size,
    };
    let mut sets = BTreeMap::new();
    let mut sampler_invocations = 0;
    for object in objects {
        let prompt = unstyled_prompt(object);
        let ids = frozen_backbone.tokenizer().tokenize(&prompt);
        if frozen_backbone.is_styled(&ids) {
            return Err(Error::Precondition(format!(
                "content prompt {prompt:?} contains a style identifier"
            )));
        }
        let mut conditioning = None;
        let mut set = ContentReferenceSet {
            object_name: object.clone(),
            images: Vec::new(),
            latents: Vec::new(),
            seeds: Vec::new(),
            generator_fingerprint: fingerprint.clone(),
            prompt_used: prompt.clone(),
        };
        for index in 0..config.content_refs_per_object {
            let seed = config.seed.wrapping_add(index as u64);
            let entry = CacheIndexEntry {
                object: object.clone(),
                seed,
                prompt: prompt.clone(),
                image_size: config.image_size,
                sample_steps: config.sample_steps,
                num_timesteps: config.num_timesteps,
                schedule_profile: config.schedule_profile,
            };
            let cached = match cache {
                Some(c) => c.lookup(&fingerprint, &entry)?,
                None => None,
            };
            let img = match cached {
                Some(img) => img,
                None => {
                    if conditioning.is_none() {
                        conditioning = Some(frozen_backbone.encode_text(&ids)?);
                    }
                    let cond = conditioning.as_ref().expect("set above");
                    let img = sample(frozen_backbone, cond, &schedule, seed, options)?;
                    sampler_invocations += 1;
                    if let Some(c) = cache {
                        c.insert(&fingerprint, entry, &img)?;
                    }
                    img
                }
            };
            // Targets always come from the 8-bit image so warm and cold runs agree.
            set.latents.push(image_to_latent(&img, frozen_backbone.latent_shape())?);
            set.images.push(img);
            set.seeds.push(seed);
        }
        sets.insert(object.clone(), set);
    }
    Ok(ContentReferences {
        sets,
        sampler_invocations,
    })
}

/// How noise and timesteps are drawn each step.
#[derive(Debug, Clone)]
pub enum DrawMode {
    Random,
    /// Always the first reference, the first object, this timestep and this
    /// noise tensor.
    Fixed { timestep: usize, noise: Tensor },
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<TrainStepRecord>,
}

const STYLED_STREAM: u64 = 1;
const CONTENT_STREAM: u64 = 2;

struct Draw {
    noisy: LatentSample,
    target: Tensor,
    token_ids: Vec<usize>,
    weight: f64,
}

fn term(d: &Draw, scale: f64) -> LossTerm<'_> {
    LossTerm {
        noisy: &d.noisy,
        token_ids: &d.token_ids,
        target: &d.target,
        weight: d.weight,
        scale,
    }
}

pub struct Trainer<'a> {
    config: &'a TrainingConfig,
    schedule: NoiseSchedule,
    draws: DrawMode,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainingConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            schedule: NoiseSchedule::build(config.num_timesteps, config.schedule_profile)?,
            draws: DrawMode::Random,
        })
    }

    pub fn with_draws(mut self, draws: DrawMode) -> Self {
        self.draws = draws;
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn rng(&self, stage: Stage, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (u8::from(stage) as u64) << 56);
        rng.set_stream(stream);
        rng
    }

    fn draw<B: Backbone>(
        &self,
        backbone: &B,
        rng: &mut ChaCha8Rng,
        targets: &[Tensor],
        objects: &[String],
        prompt_ids: &dyn Fn(&str) -> Result<Vec<usize>>,
    ) -> Result<Draw> {
        let (target, object, t, noise) = match &self.draws {
            DrawMode::Random => {
                let target = &targets[rng.random_range(0..targets.len())];
                let object = &objects[rng.random_range(0..objects.len())];
                let t = rng.random_range(0..self.schedule.num_steps());
                let noise = Tensor::randn(target.shape(), rng);
                (target, object, t, noise)
            }
            DrawMode::Fixed { timestep, noise } => (&targets[0], &objects[0], *timestep, noise.clone()),
        };
        let clean = LatentSample::clean(target.clone())?;
        let noisy = add_noise(&clean, &noise, t, &self.schedule)?;
        let _ = backbone;
        Ok(Draw {
            noisy,
            target: target.clone(),
            token_ids: prompt_ids(object)?,
            weight: self.schedule.weight(t),
        })
    }

    fn reference_latents<B: Backbone>(backbone: &B, manifest: &StyleCategoryManifest) -> Result<Vec<Tensor>> {
        let images = manifest.load_images()?;
        if images.is_empty() {
            return Err(Error::Precondition("manifest has no reference images".into()));
        }
        images
            .iter()
            .map(|img| image_to_latent(img, backbone.latent_shape()))
            .collect()
    }

    fn metadata(&self, opt: &Adam) -> serde_json::Value {
        serde_json::json!({
            "optimizer": { "name": "adam", "weight_decay": 0.0, "config": opt.config() },
            "lambda1": self.config.lambda1,
            "lambda2": self.config.lambda2,
            "seed": self.config.seed,
            "schedule_profile": self.config.schedule_profile,
            "num_timesteps": self.config.num_timesteps,
        })
    }

    /// Embedding-only optimization of the identifier rows.
    pub fn run_stage1<B: Backbone>(
        &self,
        backbone: &mut B,
        manifest: &StyleCategoryManifest,
        span: &StyleIdentifierSpan,
        on_step: &mut dyn FnMut(&TrainStepRecord),
    ) -> Result<StageOutcome> {
        let mask = stage1_freeze_mask(backbone, span)?;
        let targets = Self::reference_latents(backbone, manifest)?;
        let mut opt = Adam::new(AdamConfig::with_lr(self.config.stage1_lr), mask)?;
        let mut rng = self.rng(Stage::One, STYLED_STREAM);
        let batch = self.config.batch_size;
        let mut records = Vec::with_capacity(self.config.stage1_steps);
        for step in 1..=self.config.stage1_steps {
            let styled = |o: &str| expand_identifier(&*backbone, &styled_prompt(o, &span.placeholder), &span.placeholder, span);
            let draws = (0..batch)
                .map(|_| self.draw(&*backbone, &mut rng, &targets, &manifest.object_names, &styled))
                .collect::<Result<Vec<_>>>()?;
            let terms: Vec<LossTerm> = draws.iter().map(|d| term(d, 1.0 / batch as f64)).collect();
            let lg = backbone.loss_gradients(&terms)?;
            let l_ldm = lg.losses.iter().sum::<f64>() / batch as f64;
            if !l_ldm.is_finite() {
                return Err(Error::Divergence { stage: 1, step });
            }
            opt.step(backbone, &lg.grads)?;
            let record = TrainStepRecord {
                step,
                stage: Stage::One,
                l_ldm,
                l_content: 0.0,
                l_total: l_ldm,
                timestep_sampled: draws[0].noisy.timestep,
                content_timestep: None,
            };
            on_step(&record);
            records.push(record);
        }
        let checkpoint = Checkpoint::capture(backbone, "stage1", self.config.stage1_steps, self.metadata(&opt));
        Ok(StageOutcome { checkpoint, records })
    }

    /// The parameters joint fine-tuning may update.
    pub fn stage2_mask<B: Backbone>(&self, backbone: &B, span: &StyleIdentifierSpan) -> Result<FreezeMask> {
        let mut mask = stage1_freeze_mask(backbone, span)?;
        if !self.config.train_span_in_stage2 {
            mask.trainable_rows.clear();
        }
        for group in [ParamGroup::TextAttention, ParamGroup::DenoiserAttention] {
            mask.trainable_params
                .extend(backbone.params().names_in(group).into_iter().map(String::from));
        }
        Ok(mask)
    }

    /// Joint fine-tuning of identifier rows and attention parameters under
    /// `lambda1 * L_ldm + lambda2 * L_content`.
    pub fn run_stage2<B: Backbone>(
        &self,
        backbone: &mut B,
        manifest: &StyleCategoryManifest,
        span: &StyleIdentifierSpan,
        content_refs: &BTreeMap<String, ContentReferenceSet>,
        on_step: &mut dyn FnMut(&TrainStepRecord),
    ) -> Result<StageOutcome> {
        for o in &manifest.object_names {
            match content_refs.get(o) {
                Some(set) if !set.latents.is_empty() => {}
                _ => return Err(Error::Precondition(format!("no content references for object {o:?}"))),
            }
        }
        let mask = self.stage2_mask(backbone, span)?;
        let targets = Self::reference_latents(backbone, manifest)?;
        let mut opt = Adam::new(AdamConfig::with_lr(self.config.stage2_lr), mask)?;
        let mut styled_rng = self.rng(Stage::Two, STYLED_STREAM);
        let mut content_rng = self.rng(Stage::Two, CONTENT_STREAM);
        let batch = self.config.batch_size;
        let (l1, l2) = (self.config.lambda1, self.config.lambda2);
        let first = self.config.stage1_steps;
        let mut records = Vec::with_capacity(self.config.stage2_steps);
        for local in 1..=self.config.stage2_steps {
            let step = first + local;
            let styled = |o: &str| expand_identifier(&*backbone, &styled_prompt(o, &span.placeholder), &span.placeholder, span);
            let styled_draws = (0..batch)
                .map(|_| self.draw(&*backbone, &mut styled_rng, &targets, &manifest.object_names, &styled))
                .collect::<Result<Vec<_>>>()?;
            let content_draws = if self.config.content_loss_enabled {
                let unstyled = |o: &str| Ok(backbone.tokenizer().tokenize(&unstyled_prompt(o)));
                (0..batch)
                    .map(|_| {
                        let object = &manifest.object_names[content_rng.random_range(0..manifest.object_names.len())];
                        let refs = &content_refs[object].latents;
                        self.draw(&*backbone, &mut content_rng, refs, std::slice::from_ref(object), &unstyled)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let terms: Vec<LossTerm> = styled_draws
                .iter()
                .map(|d| term(d, l1 / batch as f64))
                .chain(content_draws.iter().map(|d| term(d, l2 / batch as f64)))
                .collect();
            let lg = backbone.loss_gradients(&terms)?;
            let l_ldm = lg.losses[..batch].iter().sum::<f64>() / batch as f64;
            let l_content = if content_draws.is_empty() {
                0.0
            } else {
                lg.losses[batch..].iter().sum::<f64>() / batch as f64
            };
            if !l_ldm.is_finite() || !l_content.is_finite() {
                return Err(Error::Divergence { stage: 2, step });
            }
            let l_total = total_loss(l_ldm, l_content, l1, l2)?;
            opt.step(backbone, &lg.grads)?;
            let record = TrainStepRecord {
                step,
                stage: Stage::Two,
                l_ldm,
                l_content,
                l_total,
                timestep_sampled: styled_draws[0].noisy.timestep,
                content_timestep: content_draws.first().map(|d| d.noisy.timestep),
            };
            on_step(&record);
            records.push(record);
        }
        let checkpoint = Checkpoint::capture(backbone, "stage2", first + self.config.stage2_steps, self.metadata(&opt));
        Ok(StageOutcome { checkpoint, records })
    }
}

pub fn run_stage1<B: Backbone>(
    backbone: &mut B,
    manifest: &StyleCategoryManifest,
    span: &StyleIdentifierSpan,
    config: &TrainingConfig,
) -> Result<StageOutcome> {
    Trainer::new(config)?.run_stage1(backbone, manifest, span, &mut |_| {})
}

pub fn run_stage2<B: Backbone>(
    backbone: &mut B,
    manifest: &StyleCategoryManifest,
    span: &StyleIdentifierSpan,
    content_refs: &BTreeMap<String, ContentReferenceSet>,
    config: &TrainingConfig,
) -> Result<StageOutcome> {
    Trainer::new(config)?.run_stage2(backbone, manifest, span, content_refs, &mut |_| {})
}

/// Files of one training run, all under a single root.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_id(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn init_checkpoint(&self) -> PathBuf {
        self.root.join("init.ckpt")
    }

    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.root.join("stage1.ckpt")
    }

    pub fn stage2_checkpoint(&self) -> PathBuf {
        self.root.join("stage2.ckpt")
    }

    pub fn records_log(&self) -> PathBuf {
        self.root.join("records.log")
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn generated_dir(&self) -> PathBuf {
        self.root.join("generated")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Where a pipeline run writes: its run root plus the shared caches.
#[derive(Debug)]
pub struct PipelineContext {
    pub run: RunLayout,
    pub keyword_cache: KeywordCache,
    pub content_cache: ContentReferenceCache,
    pub force_refresh_keywords: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome<B> {
    pub backbone: B,
    pub span: StyleIdentifierSpan,
    pub keywords: StyleKeywords,
    pub final_checkpoint: Checkpoint,
    pub records: Vec<TrainStepRecord>,
    pub content_fingerprint: String,
    /// Stages skipped because their checkpoint already existed.
    pub resumed: Vec<&'static str>,
}

fn read_records(path: &Path) -> Result<Vec<TrainStepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = std::fs::File::open(path)?;
    std::io::BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn write_records(path: &Path, records: &[TrainStepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Keywords, identifier initialization, content references, stage 1 and
/// stage 2, checkpointing at each boundary. Rerunning in the same run root
/// skips every stage whose checkpoint exists.
pub fn run_full_pipeline<B: Backbone>(
    base: B,
    manifest: &StyleCategoryManifest,
    config: &TrainingConfig,
    vlm: &dyn VlmClient,
    ctx: &PipelineContext,
) -> Result<PipelineOutcome<B>> {
    manifest.validate_fields()?;
    let trainer = Trainer::new(config)?;
    let layout = &ctx.run;
    std::fs::create_dir_all(&layout.root)?;

    let snapshot = config.to_toml()?;
    let snap_path = layout.config_snapshot();
    if snap_path.exists() {
        if std::fs::read_to_string(&snap_path)? != snapshot {
            return Err(Error::Precondition(format!(
                "run root {} was started with a different config",
                layout.root.display()
            )));
        }
    } else {
        std::fs::write(&snap_path, &snapshot)?;
    }

    let keywords = match manifest.cached() {
        Some(k) => k,
        None => {
            let images = manifest.image_payloads().map_err(|e| e.in_stage("keywords"))?;
            ctx.keyword_cache
                .get_or_extract(
                    &manifest.category_id,
                    &images,
                    vlm,
                    config.extraction_mode,
                    ctx.force_refresh_keywords,
                )
                .map_err(|e| e.in_stage("keywords"))?
                .0
        }
    };

    // The content generator is the base model, cloned before anything changes.
    let frozen = base.clone();
    let mut backbone = base;
    let mut resumed = Vec::new();

    let span = if layout.init_checkpoint().exists() {
        let ck = Checkpoint::read(&layout.init_checkpoint())?;
        backbone.load_state(&ck.params, &ck.header.spans)?;
        resumed.push("init");
        ck.header
            .spans
            .last()
            .cloned()
            .ok_or_else(|| Error::Checkpoint("init checkpoint has no span".into()))?
    } else {
        let init = (|| {
            let record = compute_keyword_embeddings(&backbone, &keywords)?;
            let span = StyleIdentifierSpan::allocate(&backbone, &manifest.placeholder, record.n())?;
            register_and_initialize(&mut backbone, &span, &record)
        })()
        .map_err(|e| e.in_stage("init"))?;
        Checkpoint::capture(&backbone, "init", 0, serde_json::json!({ "keywords": keywords.keywords() }))
            .write(&layout.init_checkpoint())?;
        init
    };

    let content = generate_content_references(&frozen, &manifest.object_names, config, Some(&ctx.content_cache))
        .map_err(|e| e.in_stage("content-references"))?;

    let mut records = read_records(&layout.records_log())?;
    records.retain(|r| r.stage == Stage::One);

    let stage1 = if layout.stage1_checkpoint().exists() {
        let ck = Checkpoint::read(&layout.stage1_checkpoint())?;
        backbone.load_state(&ck.params, &ck.header.spans)?;
        resumed.push("stage1");
        ck
    } else {
        records.clear();
        write_records(&layout.records_log(), &records)?;
        let log = std::fs::OpenOptions::new().append(true).open(layout.records_log())?;
        let mut log = std::io::BufWriter::new(log);
        let out = trainer
            .run_stage1(&mut backbone, manifest, &span, &mut |r| {
                let _ = serde_json::to_writer(&mut log, r).map(|_| log.write_all(b"\n"));
            })
            .map_err(|e| e.in_stage("stage1"))?;
        log.flush()?;
        out.checkpoint.write(&layout.stage1_checkpoint())?;
        records.extend(out.records);
        out.checkpoint
    };
    let _ = stage1;

    let final_checkpoint = if layout.stage2_checkpoint().exists() {
        let ck = Checkpoint::read(&layout.stage2_checkpoint())?;
        backbone.load_state(&ck.params, &ck.header.spans)?;
        resumed.push("stage2");
        records = read_records(&layout.records_log())?;
        ck
    } else {
        write_records(&layout.records_log(), &records)?;
        let log = std::fs::OpenOptions::new().append(true).open(layout.records_log())?;
        let mut log = std::io::BufWriter::new(log);
        let out = trainer
            .run_stage2(&mut backbone, manifest, &span, &content.sets, &mut |r| {
                let _ = serde_json::to_writer(&mut log, r).map(|_| log.write_all(b"\n"));
            })
            .map_err(|e| e.in_stage("stage2"))?;
        log.flush()?;
        out.checkpoint.write(&layout.stage2_checkpoint())?;
        records.extend(out.records);
        out.checkpoint
    };

    Ok(PipelineOutcome {
        backbone,
        span,
        keywords,
        final_checkpoint,
        records,
        content_fingerprint: frozen.fingerprint(),
        resumed,
    })
}
