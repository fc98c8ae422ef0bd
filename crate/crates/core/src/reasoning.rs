//! Style keyword reasoning with a vision-language model.
//!
//! A fixed instruction template is sent together with the reference images;
//! the model answers with a one-key JSON object whose value is the style
//! description. Responses are parsed leniently (fences and prose around the
//! object are fine) but the object itself must match the schema exactly.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KEYWORD_KEY: &str = "style keywords";

const STYLE_PROMPT: &str = "Analyze the provided images, depicting visual style keywords. \
Extract and describe the stylistic attributes related to geometric patterns, material aesthetics, \
or artistic techniques, and summary all the feature in 1\u{2013}3 concise descriptive keywords for \
each stylistic category. Avoid references to specific objects, colors, or contextual elements. \
Return the results in a dictionary format with a single key of \u{2018}style keywords\u{2019} and \
one single result.
For examples, the answer might be:
{\"style keywords\": \"geometric reliefs\"}";

pub const MAX_IMAGES_PER_REQUEST: usize = 16;

/// The instruction template sent with every keyword request.
pub fn build_style_prompt() -> String {
    STYLE_PROMPT.to_string()
}

/// SHA-256 of the template, stored with cached keywords so a template change
/// invalidates them.
pub fn template_hash() -> String {
    hex::encode(Sha256::digest(STYLE_PROMPT.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleKeywords {
    keywords: String,
    raw_response: String,
}

impl StyleKeywords {
    pub fn new(keywords: &str, raw_response: &str) -> Result<Self> {
        let trimmed = keywords.trim();
        if trimmed.is_empty() {
            return Err(Error::Schema("style keywords value is empty".into()));
        }
        if trimmed.contains(['\n', '\r']) {
            return Err(Error::Schema("style keywords value spans several lines".into()));
        }
        Ok(Self {
            keywords: trimmed.to_string(),
            raw_response: raw_response.to_string(),
        })
    }

    pub fn keywords(&self) -> &str {
        &self.keywords
    }

    pub fn raw_response(&self) -> &str {
        &self.raw_response
    }
}

/// Finds the first substring that parses as a JSON object.
fn first_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    text.char_indices()
        .filter(|&(_, c)| c == '{')
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Object(map))) => Some(map),
                _ => None,
            }
        })
}

pub fn parse_keywords(response: &str) -> Result<StyleKeywords> {
    let map = first_json_object(response)
        .ok_or_else(|| Error::Parse("no JSON object found in response".into()))?;
    if map.len() != 1 {
        return Err(Error::Schema(format!(
            "expected exactly one key {KEYWORD_KEY:?}, found {}",
            map.len()
        )));
    }
    let (key, value) = map.into_iter().next().expect("one entry");
    if key != KEYWORD_KEY {
        return Err(Error::Schema(format!("expected key {KEYWORD_KEY:?}, found {key:?}")));
    }
    let Value::String(s) = value else {
        return Err(Error::Schema("style keywords value is not a string".into()));
    };
    StyleKeywords::new(&s, response)
}

/// Lossy UTF-8 entry point for raw transport bytes.
pub fn parse_keywords_bytes(response: &[u8]) -> Result<StyleKeywords> {
    parse_keywords(&String::from_utf8_lossy(response))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

impl ImagePayload {
    pub fn png(bytes: Vec<u8>) -> Self {
        Self {
            bytes,
            media_type: "image/png".into(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let media_type = match path.extension().and_then(|e| e.to_str()).map(str::to_lowercase).as_deref() {
            Some("jpg") | Some("jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            _ => "image/png",
        };
        Ok(Self {
            bytes,
            media_type: media_type.into(),
        })
    }

    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VlmRequest {
    pub prompt_text: String,
    pub images: Vec<ImagePayload>,
}

impl VlmRequest {
    pub fn new(prompt_text: String, images: Vec<ImagePayload>) -> Result<Self> {
        if prompt_text.is_empty() {
            return Err(Error::invalid("request prompt is empty"));
        }
        if images.is_empty() || images.len() > MAX_IMAGES_PER_REQUEST {
            return Err(Error::invalid(format!(
                "a request carries 1..={MAX_IMAGES_PER_REQUEST} images, got {}",
                images.len()
            )));
        }
        Ok(Self { prompt_text, images })
    }

    pub fn payload_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for img in &self.images {
            h.update((img.bytes.len() as u64).to_le_bytes());
            h.update(&img.bytes);
        }
        h.finalize().into()
    }
}

pub trait VlmClient: Send + Sync {
    fn send(&self, request: &VlmRequest) -> Result<String>;
    fn max_retries(&self) -> usize;
    fn timeout(&self) -> Duration;
}

/// Keyword table used by [`MockVlmClient`].
pub const MOCK_KEYWORD_TABLE: &[&str] = &[
    "geometric reliefs",
    "ink wash",
    "bold stripes",
    "checkered mosaic",
    "soft gradient",
    "pixel noise texture",
    "woodcut print",
    "watercolor bloom",
];

/// Offline client: the payload hash picks a keyword from a fixed table.
/// Some hashes wrap the JSON in a markdown fence, like chatty models do.
#[derive(Debug)]
pub struct MockVlmClient {
    table: Vec<String>,
    max_retries: usize,
    calls: AtomicUsize,
}

impl Default for MockVlmClient {
    fn default() -> Self {
        Self::new(MOCK_KEYWORD_TABLE.iter().map(|s| s.to_string()).collect())
    }
}

impl MockVlmClient {
    pub fn new(table: Vec<String>) -> Self {
        assert!(!table.is_empty(), "mock keyword table must be non-empty");
        Self {
            table,
            max_retries: 2,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn response_for(&self, request: &VlmRequest) -> String {
        let h = request.payload_hash();
        let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % self.table.len();
        let body = serde_json::json!({ KEYWORD_KEY: self.table[idx] }).to_string();
        if h[8] & 1 == 1 {
            format!("Here is the analysis.\n```json\n{body}\n```")
        } else {
            body
        }
    }
}

impl VlmClient for MockVlmClient {
    fn send(&self, request: &VlmRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.response_for(request))
    }

    fn max_retries(&self) -> usize {
        self.max_retries
    }

    fn timeout(&self) -> Duration {
        Duration::ZERO
    }
}

/// Replays canned responses in order, repeating the last one when exhausted.
#[derive(Debug)]
pub struct ScriptedVlmClient {
    responses: Mutex<Vec<String>>,
    cursor: AtomicUsize,
    max_retries: usize,
}

impl ScriptedVlmClient {
    pub fn new(responses: Vec<String>, max_retries: usize) -> Self {
        assert!(!responses.is_empty(), "scripted client needs responses");
        Self {
            responses: Mutex::new(responses),
            cursor: AtomicUsize::new(0),
            max_retries,
        }
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }
}

impl VlmClient for ScriptedVlmClient {
    fn send(&self, _request: &VlmRequest) -> Result<String> {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        let responses = self.responses.lock().expect("scripted responses lock");
        Ok(responses[i.min(responses.len() - 1)].clone())
    }

    fn max_retries(&self) -> usize {
        self.max_retries
    }

    fn timeout(&self) -> Duration {
        Duration::ZERO
    }
}

pub const ENV_ENDPOINT: &str = "STYLECRAFT_VLM_ENDPOINT";
pub const ENV_API_KEY: &str = "STYLECRAFT_VLM_API_KEY";
pub const ENV_MODEL: &str = "STYLECRAFT_VLM_MODEL";

/// Chat-completion style HTTP client: one user message holding the template
/// as a text part followed by one image part per payload.
#[derive(Debug, Clone)]
pub struct HttpVlmClient {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_retries: usize,
    pub timeout: Duration,
}

impl HttpVlmClient {
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| Error::invalid(format!("{ENV_ENDPOINT} is not set; use --mock-vlm to run offline")))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(ENV_API_KEY).ok(),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o".into()),
            max_retries: 3,
            timeout: Duration::from_secs(60),
        })
    }

    pub fn request_body(&self, request: &VlmRequest) -> Value {
        let mut content = vec![serde_json::json!({ "type": "text", "text": request.prompt_text })];
        content.extend(request.images.iter().map(|img| {
            serde_json::json!({ "type": "image_url", "image_url": { "url": img.data_url() } })
        }));
        serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": content }],
        })
    }

    pub fn response_text(body: &Value) -> Result<String> {
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))
    }
}

impl VlmClient for HttpVlmClient {
    fn send(&self, request: &VlmRequest) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(request))
            .map_err(|e| Error::Transport(e.to_string()))?;
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Self::response_text(&body)
    }

    fn max_retries(&self) -> usize {
        self.max_retries
    }

    fn timeout(&self) -> Duration {
        self.timeout
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMode {
    /// All reference images in one request.
    #[default]
    Joint,
    /// One request per image; the most frequent answer wins.
    PerImage,
}

/// Sends the template with the images, retrying on unusable answers.
/// Issues at most `max_retries + 1` requests.
pub fn extract_style_keywords(images: &[ImagePayload], client: &dyn VlmClient) -> Result<StyleKeywords> {
    if images.is_empty() {
        return Err(Error::invalid("no reference images given"));
    }
    let request = VlmRequest::new(build_style_prompt(), images.to_vec())?;
    let attempts = client.max_retries() + 1;
    let mut last_response = String::new();
    for attempt in 1..=attempts {
        match client.send(&request) {
            Ok(text) => match parse_keywords(&text) {
                Ok(k) => return Ok(k),
                Err(e) => {
                    log::warn!("keyword attempt {attempt}/{attempts} unusable: {e}");
                    last_response = text;
                }
            },
            Err(e) => {
                log::warn!("keyword attempt {attempt}/{attempts} failed: {e}");
                last_response = e.to_string();
            }
        }
    }
    Err(Error::ExtractionFailed {
        attempts,
        last_response,
    })
}

pub fn extract_style_keywords_with_mode(
    images: &[ImagePayload],
    client: &dyn VlmClient,
    mode: ExtractionMode,
) -> Result<StyleKeywords> {
    match mode {
        ExtractionMode::Joint => extract_style_keywords(images, client),
        ExtractionMode::PerImage => {
            if images.is_empty() {
                return Err(Error::invalid("no reference images given"));
            }
            let answers = images
                .iter()
                .map(|img| extract_style_keywords(std::slice::from_ref(img), client))
                .collect::<Result<Vec<_>>>()?;
            // first answer among those with the highest count
            let best = answers
                .iter()
                .max_by_key(|a| {
                    let count = answers.iter().filter(|b| b.keywords == a.keywords).count();
                    let first = answers.iter().position(|b| b.keywords == a.keywords).unwrap_or(0);
                    (count, std::cmp::Reverse(first))
                })
                .expect("non-empty");
            Ok(best.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordCacheEntry {
    pub category_id: String,
    pub keywords: String,
    pub raw_response: String,
    pub timestamp: DateTime<Utc>,
    pub template_hash: String,
}

/// One JSON file per style category.
#[derive(Debug, Clone)]
pub struct KeywordCache {
    dir: PathBuf,
}

impl KeywordCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, category_id: &str) -> PathBuf {
        self.dir.join(format!("{category_id}.json"))
    }

    /// Returns the entry only if it was produced by the current template.
    pub fn load(&self, category_id: &str) -> Result<Option<KeywordCacheEntry>> {
        let path = self.path_for(category_id);
        if !path.exists() {
            return Ok(None);
        }
        let entry: KeywordCacheEntry = serde_json::from_slice(&std::fs::read(&path)?)?;
        Ok((entry.template_hash == template_hash() && entry.category_id == category_id).then_some(entry))
    }

    pub fn store(&self, category_id: &str, keywords: &StyleKeywords) -> Result<KeywordCacheEntry> {
        std::fs::create_dir_all(&self.dir)?;
        let entry = KeywordCacheEntry {
            category_id: category_id.to_string(),
            keywords: keywords.keywords().to_string(),
            raw_response: keywords.raw_response().to_string(),
            timestamp: Utc::now(),
            template_hash: template_hash(),
        };
        let tmp = self.path_for(category_id).with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry)?)?;
        std::fs::rename(&tmp, self.path_for(category_id))?;
        Ok(entry)
    }

    /// Cached keywords unless `force_refresh`; otherwise asks the client and
    /// stores the answer. The flag reports whether the cache was used.
    pub fn get_or_extract(
        &self,
        category_id: &str,
        images: &[ImagePayload],
        client: &dyn VlmClient,
        mode: ExtractionMode,
        force_refresh: bool,
    ) -> Result<(StyleKeywords, bool)> {
        if !force_refresh {
            if let Some(entry) = self.load(category_id)? {
                return Ok((StyleKeywords::new(&entry.keywords, &entry.raw_response)?, true));
            }
        }
        let keywords = extract_style_keywords_with_mode(images, client, mode)?;
        self.store(category_id, &keywords)?;
        Ok((keywords, false))
    }
}
