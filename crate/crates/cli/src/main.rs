use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stylecraft::checkpoint::Checkpoint;
use stylecraft::corpus::make_toy_corpus;
use stylecraft::evaluate::{evaluate_category, generate_image};
use stylecraft::imaging::save_png;
use stylecraft::metrics::{
    build_report, default_iqa_pairs, render_comparison, Embedder, HttpClipEmbedder, MetricReport, MockEmbedder,
    ReportMetadata,
};
use stylecraft::reasoning::{HttpVlmClient, KeywordCache, MockVlmClient, VlmClient};
use stylecraft::trainer::{run_full_pipeline, ContentReferenceCache, PipelineContext, RunLayout};
use stylecraft::{load_manifest, ToyBackbone, TrainingConfig};

#[derive(Parser, Debug)]
#[command(name = "stylecraft", version, about = "Style personalization for a toy text-to-image model")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GlobalArgs {
    /// TOML training config; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda2: Option<f64>,
    #[arg(long, global = true)]
    stage1_steps: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    stage1_lr: Option<f64>,
    #[arg(long, global = true)]
    stage2_steps: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    stage2_lr: Option<f64>,
    #[arg(long, global = true)]
    image_size: Option<u32>,
    /// Denoising steps used when sampling.
    #[arg(long, global = true)]
    sample_steps: Option<usize>,
    /// Content reference images per object.
    #[arg(long, global = true)]
    content_refs: Option<usize>,
    /// Use the offline deterministic VLM instead of the HTTP endpoint.
    #[arg(long, global = true)]
    mock_vlm: bool,
    /// Root for runs and caches.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic style corpus (procedural textures, three images per category).
    MakeCorpus {
        dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        categories: usize,
    },
    /// Ask the VLM for style keywords and cache them.
    ExtractKeywords {
        manifest: PathBuf,
        #[arg(long)]
        force_refresh: bool,
    },
    /// Run keyword extraction, initialization and both training stages.
    Train {
        manifest: PathBuf,
        /// Run directory name under --out; defaults to the category id.
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        force_refresh: bool,
    },
    /// Sample an image from a checkpoint.
    Generate {
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Where to write the PNG; defaults to the run's generated/ directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score checkpoints against their categories. Takes CHECKPOINT MANIFEST pairs.
    Evaluate {
        #[arg(required = true, num_args = 2.., value_names = ["CHECKPOINT", "MANIFEST"])]
        pairs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = EmbedderKind::Mock)]
        embedder: EmbedderKind,
        /// Report path; defaults to report.json beside the first checkpoint.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print a comparison table of report files, one row per report.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EmbedderKind {
    Mock,
    Real,
}

impl GlobalArgs {
    fn apply(&self, mut c: TrainingConfig) -> stylecraft::Result<TrainingConfig> {
        macro_rules! set {
            ($($field:ident <- $flag:expr),* $(,)?) => {
                $(if let Some(v) = $flag { c.$field = v; })*
            };
        }
        set!(
            seed <- self.seed,
            lambda1 <- self.lambda1,
            lambda2 <- self.lambda2,
            stage1_steps <- self.stage1_steps,
            stage1_lr <- self.stage1_lr,
            stage2_steps <- self.stage2_steps,
            stage2_lr <- self.stage2_lr,
            image_size <- self.image_size,
            sample_steps <- self.sample_steps,
            content_refs_per_object <- self.content_refs,
        );
        c.validate()?;
        Ok(c)
    }

    /// Flags over `--config` (or `fallback`) over defaults.
    fn resolve(&self, fallback: Option<&Path>) -> anyhow::Result<TrainingConfig> {
        let file = self.config.as_deref().or(fallback.filter(|p| p.exists()));
        let base = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                TrainingConfig::from_toml(&text)?
            }
            None => TrainingConfig::default(),
        };
        Ok(self.apply(base)?)
    }

    fn vlm(&self) -> anyhow::Result<Box<dyn VlmClient>> {
        if self.mock_vlm {
            return Ok(Box::new(MockVlmClient::default()));
        }
        Ok(Box::new(HttpVlmClient::from_env()?))
    }

    fn keyword_cache(&self) -> KeywordCache {
        KeywordCache::new(self.out.join("cache").join("keywords"))
    }
}

fn run_root_of(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn file_stem_for(prompt: &str, seed: u64) -> String {
    let slug: String = prompt
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    let slug = slug.split('_').filter(|s| !s.is_empty()).collect::<Vec<_>>().join("_");
    format!("{slug}-seed{seed}")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::MakeCorpus { dir, categories } => {
            let seed = g.seed.unwrap_or(0);
            for (path, m) in make_toy_corpus(&dir, categories, seed)? {
                println!("{}\t{}", m.category_id, path.display());
            }
        }
        Command::ExtractKeywords { manifest, force_refresh } => {
            let config = g.resolve(None)?;
            let m = load_manifest(&manifest)?;
            let client = g.vlm()?;
            let (keywords, hit) = g.keyword_cache().get_or_extract(
                &m.category_id,
                &m.image_payloads()?,
                client.as_ref(),
                config.extraction_mode,
                force_refresh,
            )?;
            log::info!("{}: cache {}", m.category_id, if hit { "hit" } else { "miss" });
            println!("{}\t{}", m.category_id, keywords.keywords());
        }
        Command::Train {
            manifest,
            run_id,
            force_refresh,
        } => {
            let config = g.resolve(None)?;
            let m = load_manifest(&manifest)?;
            let run_id = run_id.unwrap_or_else(|| m.category_id.clone());
            let layout = RunLayout::new(g.out.join(&run_id));
            let ctx = PipelineContext {
                run: layout.clone(),
                keyword_cache: g.keyword_cache(),
                content_cache: ContentReferenceCache::new(g.out.join("cache").join("content_refs")),
                force_refresh_keywords: force_refresh,
            };
            let client = g.vlm()?;
            let base = ToyBackbone::new(config.model.clone())?;
            let outcome = run_full_pipeline(base, &m, &config, client.as_ref(), &ctx)?;
            if !outcome.resumed.is_empty() {
                log::info!("resumed past: {}", outcome.resumed.join(", "));
            }
            if let (Some(first), Some(last)) = (outcome.records.first(), outcome.records.last()) {
                log::info!("loss {:.4} -> {:.4}", first.l_total, last.l_total);
            }
            println!(
                "{}\tkeywords={:?}\tcheckpoint={}",
                m.category_id,
                outcome.keywords.keywords(),
                layout.stage2_checkpoint().display()
            );
        }
        Command::Generate {
            checkpoint,
            prompt,
            output,
        } => {
            let root = run_root_of(&checkpoint);
            let config = g.resolve(Some(&RunLayout::new(&root).config_snapshot()))?;
            let backbone = Checkpoint::read(&checkpoint)?.to_toy()?;
            let image = generate_image(&backbone, &prompt, config.seed, &config)?;
            let path = output.unwrap_or_else(|| {
                RunLayout::new(&root)
                    .generated_dir()
                    .join(format!("{}.png", file_stem_for(&prompt, config.seed)))
            });
            save_png(&image, &path)?;
            println!("{}", path.display());
        }
        Command::Evaluate {
            pairs,
            embedder,
            output,
        } => {
            if pairs.len() % 2 != 0 {
                bail!("evaluate takes CHECKPOINT MANIFEST pairs, got {} paths", pairs.len());
            }
            let embedder: Box<dyn Embedder> = match embedder {
                EmbedderKind::Mock => Box::new(MockEmbedder::default()),
                EmbedderKind::Real => Box::new(HttpClipEmbedder::from_env()?),
            };
            let iqa_pairs = default_iqa_pairs();
            let mut per_category = BTreeMap::new();
            let mut pool = Vec::new();
            let mut run_ids = Vec::new();
            for pair in pairs.chunks(2) {
                let (ckpt, manifest) = (&pair[0], &pair[1]);
                let root = run_root_of(ckpt);
                let layout = RunLayout::new(&root);
                let config = g.resolve(Some(&layout.config_snapshot()))?;
                let backbone = Checkpoint::read(ckpt)?.to_toy()?;
                let m = load_manifest(manifest)?;
                let eval = evaluate_category(&backbone, &m, embedder.as_ref(), &config, &iqa_pairs)?;
                for (object, _, image) in &eval.samples {
                    let name = format!("eval-{object}-seed{}.png", config.seed);
                    save_png(image, &layout.generated_dir().join(name))?;
                }
                if per_category.insert(m.category_id.clone(), eval.metrics).is_some() {
                    bail!("category {} evaluated twice", m.category_id);
                }
                pool.extend(eval.distractor_pool.into_iter().filter(|d| !pool.contains(d)).collect::<Vec<_>>());
                run_ids.push(layout.run_id());
            }
            let report = build_report(
                per_category,
                ReportMetadata::new(run_ids.join(","), embedder.id(), pool),
            )?;
            let path = output.unwrap_or_else(|| RunLayout::new(run_root_of(&pairs[0])).report_path());
            report.write(&path)?;
            print!("{}", report.render_table());
            println!("report: {}", path.display());
        }
        Command::Report { results } => {
            let mut rows = Vec::new();
            for path in &results {
                let report = MetricReport::read(path)?;
                let name = if report.metadata.run_id.is_empty() {
                    path.display().to_string()
                } else {
                    report.metadata.run_id.clone()
                };
                rows.push((name, report.aggregate));
            }
            print!("{}", render_comparison(&rows)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match err.downcast_ref::<stylecraft::Error>() {
                Some(e) => eprintln!("error[{}]: {e}", e.kind()),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
