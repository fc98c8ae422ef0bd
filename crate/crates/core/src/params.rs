//! Named, group-tagged parameter storage shared by all backbones.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TokenEmbedding,
    TextAttention,
    TextOther,
    DenoiserAttention,
    DenoiserOther,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::TokenEmbedding,
        ParamGroup::TextAttention,
        ParamGroup::TextOther,
        ParamGroup::DenoiserAttention,
        ParamGroup::DenoiserOther,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::TokenEmbedding => "token_embedding",
            ParamGroup::TextAttention => "text_attention",
            ParamGroup::TextOther => "text_other",
            ParamGroup::DenoiserAttention => "denoiser_attention",
            ParamGroup::DenoiserOther => "denoiser_other",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Every trainable array of a backbone, keyed by a stable dotted name.
/// Each name belongs to exactly one group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Conflict(format!("parameter {name} already registered")));
        }
        self.params.insert(name, Param { group, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.params[name].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<&str> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(p.group.as_str().as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
