//! Multi-token style identifiers: allocation, keyword-based initialization,
//! prompt expansion and the stage-1 freeze mask.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::reasoning::StyleKeywords;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

pub const DEFAULT_PLACEHOLDER: &str = "[V*]";

/// Keywords longer than this many tokens are truncated.
pub const MAX_SPAN_TOKENS: usize = 8;

/// The placeholder and the contiguous vocabulary rows it expands into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleIdentifierSpan {
    pub placeholder: String,
    pub token_names: Vec<String>,
    pub token_ids: Vec<usize>,
    #[serde(default)]
    pub source_keywords: String,
    #[serde(default)]
    pub init_hash: String,
}

impl StyleIdentifierSpan {
    /// Reserves `n` ids directly past the current vocabulary.
    pub fn allocate<B: Backbone>(backbone: &B, placeholder: &str, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("a style identifier needs at least one token"));
        }
        if placeholder.trim().is_empty() {
            return Err(Error::invalid("placeholder must be non-empty"));
        }
        let start = backbone.vocab_size();
        Ok(Self {
            placeholder: placeholder.to_string(),
            token_names: (1..=n).map(|i| format!("V{i}*")).collect(),
            token_ids: (start..start + n).collect(),
            source_keywords: String::new(),
            init_hash: String::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.token_ids.len()
    }

    fn validate(&self) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(Error::invalid("style identifier span is empty"));
        }
        if self.token_names.len() != self.token_ids.len() {
            return Err(Error::invalid("span token names and ids differ in length"));
        }
        if self.token_ids.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::invalid("span token ids must be contiguous"));
        }
        Ok(())
    }

    fn is_registered_in<B: Backbone>(&self, backbone: &B) -> bool {
        backbone.spans().iter().any(|s| s.token_ids == self.token_ids)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingInitRecord {
    /// `[n, embed_dim]` lookup rows of the keyword tokens.
    pub keyword_embeddings: Tensor,
    pub source_keywords: String,
    pub initialized_at: DateTime<Utc>,
}

impl EmbeddingInitRecord {
    pub fn n(&self) -> usize {
        self.keyword_embeddings.shape()[0]
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.keyword_embeddings.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Token ids of the keywords with unknown pieces removed, capped at
/// [`MAX_SPAN_TOKENS`].
pub fn keyword_token_ids(tokenizer: &dyn Tokenizer, keywords: &str) -> Vec<usize> {
    let unk = tokenizer.unk_id();
    let mut ids: Vec<usize> = tokenizer
        .tokenize(keywords)
        .into_iter()
        .filter(|id| Some(*id) != unk)
        .collect();
    if ids.len() > MAX_SPAN_TOKENS {
        log::warn!(
            "style keywords {keywords:?} produce {} tokens; truncating to {MAX_SPAN_TOKENS}",
            ids.len()
        );
        ids.truncate(MAX_SPAN_TOKENS);
    }
    ids
}

/// Lookup-table rows (not contextualized encodings) for each keyword token.
pub fn compute_keyword_embeddings<B: Backbone>(
    backbone: &B,
    keywords: &StyleKeywords,
) -> Result<EmbeddingInitRecord> {
    let ids = keyword_token_ids(backbone.tokenizer(), keywords.keywords());
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "style keywords {:?} contain no known tokens",
            keywords.keywords()
        )));
    }
    Ok(EmbeddingInitRecord {
        keyword_embeddings: backbone.token_embeddings(&ids)?,
        source_keywords: keywords.keywords().to_string(),
        initialized_at: Utc::now(),
    })
}

/// Tokenizes `prompt`, replacing the single occurrence of `placeholder` with
/// the span's ids in order.
pub fn expand_identifier<B: Backbone>(
    backbone: &B,
    prompt: &str,
    placeholder: &str,
    span: &StyleIdentifierSpan,
) -> Result<Vec<usize>> {
    if !span.is_registered_in(backbone) {
        return Err(Error::NotFound(format!("span for {:?} is not registered", span.placeholder)));
    }
    let count = prompt.matches(placeholder).count();
    match count {
        0 => return Err(Error::MissingPlaceholder(placeholder.to_string())),
        1 => {}
        _ => {
            return Err(Error::AmbiguousPlaceholder {
                placeholder: placeholder.to_string(),
                count,
            })
        }
    }
    let (before, after) = prompt.split_once(placeholder).expect("counted once");
    let tok = backbone.tokenizer();
    let mut ids = tok.tokenize(before);
    ids.extend_from_slice(&span.token_ids);
    ids.extend(tok.tokenize(after));
    Ok(ids)
}

/// Appends the span rows to the embedding table, initialized from the record.
pub fn register_and_initialize<B: Backbone>(
    backbone: &mut B,
    span: &StyleIdentifierSpan,
    record: &EmbeddingInitRecord,
) -> Result<StyleIdentifierSpan> {
    span.validate()?;
    let vocab = backbone.vocab_size();
    if span.is_registered_in(backbone) || span.token_ids[0] < vocab {
        return Err(Error::Conflict(format!(
            "span ids {:?} already present in a vocabulary of {vocab}",
            span.token_ids
        )));
    }
    if span.token_ids[0] != vocab {
        return Err(Error::invalid(format!(
            "span must start at the next free id {vocab}, starts at {}",
            span.token_ids[0]
        )));
    }
    if record.n() != span.n() {
        return Err(Error::invalid(format!(
            "init record has {} rows, span has {}",
            record.n(),
            span.n()
        )));
    }
    let d = backbone.embed_dim();
    if record.keyword_embeddings.shape() != [span.n(), d] || !record.keyword_embeddings.is_finite() {
        return Err(Error::invalid("init record rows must be finite and embed_dim wide"));
    }
    let table_name = backbone.embedding_table().to_string();
    let table = &mut backbone.params_mut().get_mut(&table_name)?.value;
    let mut data = std::mem::replace(table, crate::tensor::Tensor::zeros(&[0])).into_data();
    data.extend_from_slice(record.keyword_embeddings.data());
    *table = Tensor::new(vec![vocab + span.n(), d], data)?;

    let mut registered = span.clone();
    registered.source_keywords = record.source_keywords.clone();
    registered.init_hash = record.hash();
    backbone.spans_mut().push(registered.clone());
    Ok(registered)
}

/// Which parameters an optimization stage may touch. Everything not listed is
/// frozen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeMask {
    /// Embedding-table rows that may change.
    pub trainable_rows: BTreeSet<usize>,
    /// Whole parameters that may change.
    pub trainable_params: BTreeSet<String>,
}

impl FreezeMask {
    pub fn everything_else_frozen(&self) -> bool {
        true
    }

    pub fn trainable_scalar_count<B: Backbone>(&self, backbone: &B) -> usize {
        let rows = self.trainable_rows.len() * backbone.embed_dim();
        let whole: usize = self
            .trainable_params
            .iter()
            .map(|n| backbone.params().tensor(n).len())
            .sum();
        rows + whole
    }
}

/// Only the span rows are trainable.
pub fn stage1_freeze_mask<B: Backbone>(backbone: &B, span: &StyleIdentifierSpan) -> Result<FreezeMask> {
    if span.token_ids.is_empty() {
        return Err(Error::invalid("style identifier span is empty"));
    }
    if !span.is_registered_in(backbone) {
        return Err(Error::NotFound(format!("span for {:?} is not registered", span.placeholder)));
    }
    Ok(FreezeMask {
        trainable_rows: span.token_ids.iter().copied().collect(),
        trainable_params: BTreeSet::new(),
    })
}
