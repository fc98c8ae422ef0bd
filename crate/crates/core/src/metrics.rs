//! Evaluation: color-distribution similarity, prompt retrieval precision and
//! antonym-prompt quality, all behind a swappable image/text embedder.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::encode_png;
use crate::reasoning::ImagePayload;

pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_IQA_TEMPERATURE: f64 = 0.01;
pub const DEFAULT_IQA_PAIRS: &[(&str, &str)] = &[("Good photo.", "Bad photo.")];

/// Maps images and text into a shared space. Outputs must be unit-norm and
/// deterministic.
pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok(dot / (na * nb))
}

/// Offline embedder. Images go through a fixed random projection of color
/// statistics; text is a hashed bag of lowercase words.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    projection: Vec<f64>,
    seed: u64,
}

const IMAGE_FEATURES: usize = 3 * (2 + 4);

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * IMAGE_FEATURES)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { dim, projection, seed }
    }

    fn image_features(image: &RgbImage) -> [f64; IMAGE_FEATURES] {
        let n = (image.width() * image.height()).max(1) as f64;
        let mut f = [0.0; IMAGE_FEATURES];
        for c in 0..3 {
            let vals = image.pixels().map(|p| p[c] as f64 / 255.0);
            let mean = vals.clone().sum::<f64>() / n;
            let var = vals.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            f[c * 6] = mean - 0.5;
            f[c * 6 + 1] = var.sqrt();
            for v in vals {
                f[c * 6 + 2 + ((v * 4.0) as usize).min(3)] += 1.0 / n;
            }
        }
        f
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(word.as_bytes())
            .finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(64, 0)
    }
}

impl Embedder for MockEmbedder {
    fn id(&self) -> String {
        format!("mock-d{}-s{}", self.dim, self.seed)
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let f = Self::image_features(image);
        let v = (0..self.dim)
            .map(|i| {
                let row = &self.projection[i * IMAGE_FEATURES..(i + 1) * IMAGE_FEATURES];
                row.iter().zip(&f).map(|(w, x)| w * x).sum::<f64>() + 1e-3
            })
            .collect();
        normalize(v)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut words = 0;
        for word in text
            .split(|c: char| !c.is_alphanumeric() && c != '*')
            .filter(|w| !w.is_empty())
        {
            words += 1;
            for (a, w) in acc.iter_mut().zip(self.word_vector(&word.to_lowercase())) {
                *a += w;
            }
        }
        if words == 0 {
            acc = self.word_vector("");
        }
        normalize(acc)
    }
}

/// Adapter for an external CLIP service. The endpoint takes
/// `{"text": ...}` or `{"image": <data url>}` and answers `{"embedding": [...]}`.
/// Configured through `STYLECRAFT_CLIP_ENDPOINT`.
#[derive(Debug, Clone)]
pub struct HttpClipEmbedder {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpClipEmbedder {
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("STYLECRAFT_CLIP_ENDPOINT").map_err(|_| {
            Error::Precondition("STYLECRAFT_CLIP_ENDPOINT is not set; use the mock embedder offline".into())
        })?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(60)))
            .build()
            .into();
        Ok(Self { endpoint, agent })
    }

    fn call(&self, body: serde_json::Value) -> Result<Vec<f64>> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let v: Vec<f64> = serde_json::from_value(value["embedding"].clone())
            .map_err(|e| Error::Schema(format!("embedding response: {e}")))?;
        normalize(v)
    }
}

impl Embedder for HttpClipEmbedder {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let payload = ImagePayload::png(encode_png(image)?);
        self.call(serde_json::json!({ "image": payload.data_url() }))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.call(serde_json::json!({ "text": text }))
    }
}

/// Per-channel normalized histogram, `counts` laid out `[channel][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogram {
    pub bins_per_channel: usize,
    pub counts: Vec<f64>,
}

impl ColorHistogram {
    pub fn of(image: &RgbImage, bins: usize) -> Result<Self> {
        if bins == 0 || bins > 256 {
            return Err(Error::invalid(format!("bins must be in 1..=256, got {bins}")));
        }
        let n = image.width() as usize * image.height() as usize;
        if n == 0 {
            return Err(Error::invalid("image has no pixels"));
        }
        let mut counts = vec![0usize; 3 * bins];
        for p in image.pixels() {
            for c in 0..3 {
                counts[c * bins + p[c] as usize * bins / 256] += 1;
            }
        }
        Ok(Self {
            bins_per_channel: bins,
            counts: counts.into_iter().map(|k| k as f64 / n as f64).collect(),
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.counts[c * self.bins_per_channel..(c + 1) * self.bins_per_channel]
    }

    pub fn mean(histograms: &[ColorHistogram]) -> Result<Self> {
        let first = histograms
            .first()
            .ok_or_else(|| Error::invalid("no histograms to average"))?;
        let mut counts = vec![0.0; first.counts.len()];
        for h in histograms {
            if h.bins_per_channel != first.bins_per_channel {
                return Err(Error::invalid("histograms have different bin counts"));
            }
            counts.iter_mut().zip(&h.counts).for_each(|(a, b)| *a += b);
        }
        let k = histograms.len() as f64;
        counts.iter_mut().for_each(|a| *a /= k);
        Ok(Self {
            bins_per_channel: first.bins_per_channel,
            counts,
        })
    }

    /// Channel-mean of `sum_b min(a_b, b_b)`.
    pub fn intersection(&self, other: &ColorHistogram) -> Result<f64> {
        if self.bins_per_channel != other.bins_per_channel {
            return Err(Error::invalid("histograms have different bin counts"));
        }
        let per_channel: f64 = (0..3)
            .map(|c| {
                self.channel(c)
                    .iter()
                    .zip(other.channel(c))
                    .map(|(a, b)| a.min(*b))
                    .sum::<f64>()
            })
            .sum();
        Ok(per_channel / 3.0)
    }
}

pub fn pixel_hist_score(generated: &RgbImage, references: &[RgbImage], bins: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::invalid("pixel_hist_score needs at least one reference"));
    }
    let g = ColorHistogram::of(generated, bins)?;
    let refs = references
        .iter()
        .map(|r| ColorHistogram::of(r, bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.intersection(&ColorHistogram::mean(&refs)?)?.clamp(0.0, 1.0))
}

/// Fraction of images whose own prompt beats every distractor. Ties count
/// as misses.
pub fn clip_r_precision(
    generated: &[(RgbImage, String)],
    distractor_prompts: &[String],
    embedder: &dyn Embedder,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::invalid("clip_r_precision needs at least one generated image"));
    }
    if distractor_prompts.is_empty() {
        return Err(Error::invalid("clip_r_precision needs at least one distractor"));
    }
    let mut seen = std::collections::HashSet::new();
    for d in distractor_prompts {
        if !seen.insert(d.as_str()) {
            return Err(Error::invalid(format!("duplicate distractor prompt {d:?}")));
        }
    }
    let distractors = distractor_prompts
        .iter()
        .map(|d| embedder.embed_text(d))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    for (image, prompt) in generated {
        if seen.contains(prompt.as_str()) {
            return Err(Error::invalid(format!("true prompt {prompt:?} also appears among distractors")));
        }
        let img = embedder.embed_image(image)?;
        let truth = cosine(&img, &embedder.embed_text(prompt)?)?;
        let mut best_other = f64::NEG_INFINITY;
        for d in &distractors {
            best_other = best_other.max(cosine(&img, d)?);
        }
        if truth > best_other {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// Two-way softmax at the positive entry after dividing by `temperature`.
pub fn iqa_pair_score(s_pos: f64, s_neg: f64, temperature: f64) -> f64 {
    // 1 / (1 + exp((s- - s+) / T)), which only depends on the difference
    1.0 / (1.0 + ((s_neg - s_pos) / temperature).exp())
}

pub fn clip_iqa_score(image: &RgbImage, embedder: &dyn Embedder, prompt_pairs: &[(String, String)]) -> Result<f64> {
    clip_iqa_score_with_temperature(image, embedder, prompt_pairs, DEFAULT_IQA_TEMPERATURE)
}

pub fn clip_iqa_score_with_temperature(
    image: &RgbImage,
    embedder: &dyn Embedder,
    prompt_pairs: &[(String, String)],
    temperature: f64,
) -> Result<f64> {
    if prompt_pairs.is_empty() {
        return Err(Error::invalid("clip_iqa_score needs at least one prompt pair"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let img = embedder.embed_image(image)?;
    let mut total = 0.0;
    for (pos, neg) in prompt_pairs {
        let sp = cosine(&img, &embedder.embed_text(pos)?)?;
        let sn = cosine(&img, &embedder.embed_text(neg)?)?;
        total += iqa_pair_score(sp, sn, temperature);
    }
    Ok(total / prompt_pairs.len() as f64)
}

pub fn default_iqa_pairs() -> Vec<(String, String)> {
    DEFAULT_IQA_PAIRS
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub pixel_hist: f64,
    pub clip_r_precision: f64,
    pub clip_iqa: f64,
}

impl MetricTriple {
    pub fn values(&self) -> [f64; 3] {
        [self.pixel_hist, self.clip_r_precision, self.clip_iqa]
    }
}

pub const METRIC_COLUMNS: [&str; 3] = ["Pixel-Hist", "CLIP R-Precision", "CLIP-IQA"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub run_id: String,
    pub embedder_id: String,
    pub timestamp: chrono::DateTime<chrono::Utc>,
    #[serde(default)]
    pub distractor_pool: Vec<String>,
}

impl ReportMetadata {
    /// Stamped with the current time.
    pub fn new(run_id: impl Into<String>, embedder_id: impl Into<String>, distractor_pool: Vec<String>) -> Self {
        Self {
            run_id: run_id.into(),
            embedder_id: embedder_id.into(),
            timestamp: chrono::Utc::now(),
            distractor_pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_category: BTreeMap<String, MetricTriple>,
    pub aggregate: MetricTriple,
    pub metadata: ReportMetadata,
}

pub fn build_report(results: BTreeMap<String, MetricTriple>, metadata: ReportMetadata) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::invalid("cannot build a report from no results"));
    }
    let k = results.len() as f64;
    let mean = |f: fn(&MetricTriple) -> f64| results.values().map(f).sum::<f64>() / k;
    let aggregate = MetricTriple {
        pixel_hist: mean(|t| t.pixel_hist),
        clip_r_precision: mean(|t| t.clip_r_precision),
        clip_iqa: mean(|t| t.clip_iqa),
    };
    Ok(MetricReport {
        per_category: results,
        aggregate,
        metadata,
    })
}

impl MetricReport {
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("report {}", path.display())),
            _ => e.into(),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, MetricTriple)> = self
            .per_category
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        rows.push(("mean".into(), self.aggregate));
        render_rows("category", &rows, &[])
    }
}

/// Index of the best and second-best value in each column (higher is better).
/// Ties keep the earlier row, so each column gets at most one of each marker.
pub fn rank_markers(rows: &[MetricTriple]) -> [(Option<usize>, Option<usize>); 3] {
    std::array::from_fn(|col| {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[b].values()[col].total_cmp(&rows[a].values()[col]).then(a.cmp(&b)));
        (order.first().copied(), order.get(1).copied())
    })
}

fn render_rows(label: &str, rows: &[(String, MetricTriple)], marks: &[(Option<usize>, Option<usize>)]) -> String {
    let cells: Vec<[String; 3]> = rows
        .iter()
        .enumerate()
        .map(|(i, (_, t))| {
            std::array::from_fn(|col| {
                let v = format!("{:.4}", t.values()[col]);
                match marks.get(col) {
                    Some((Some(b), _)) if *b == i => format!("**{v}**"),
                    Some((_, Some(s))) if *s == i => format!("_{v}_"),
                    _ => v,
                }
            })
        })
        .collect();
    let name_w = rows.iter().map(|(n, _)| n.len()).chain([label.len()]).max().unwrap_or(0);
    let col_w: Vec<usize> = (0..3)
        .map(|c| cells.iter().map(|r| r[c].len()).chain([METRIC_COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{label:<name_w$}");
    for (c, h) in METRIC_COLUMNS.iter().enumerate() {
        let _ = write!(out, "  {h:>w$}", w = col_w[c]);
    }
    out.push('\n');
    for ((name, _), row) in rows.iter().zip(&cells) {
        let _ = write!(out, "{name:<name_w$}");
        for (c, cell) in row.iter().enumerate() {
            let _ = write!(out, "  {cell:>w$}", w = col_w[c]);
        }
        out.push('\n');
    }
    out
}

/// Comparison table across methods; best value per column in `**bold**`,
/// second best in `_italics_`.
pub fn render_comparison(methods: &[(String, MetricTriple)]) -> Result<String> {
    if methods.is_empty() {
        return Err(Error::invalid("nothing to compare"));
    }
    let triples: Vec<MetricTriple> = methods.iter().map(|(_, t)| *t).collect();
    let marks = if methods.len() > 1 { rank_markers(&triples).to_vec() } else { Vec::new() };
    Ok(render_rows("method", methods, &marks))
}
