//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, a JSON header
//! (format version, backbone config, parameter manifest, span registry,
//! training metadata), then every array in manifest order as little-endian
//! `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::embedding::StyleIdentifierSpan;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::toy::{ToyBackbone, ToyModelConfig};

pub const MAGIC: &[u8; 8] = b"STYLECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub backbone: serde_json::Value,
    pub attention_scope: String,
    pub parameters: Vec<ParamEntry>,
    pub spans: Vec<StyleIdentifierSpan>,
    pub stage: String,
    pub global_step: usize,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn capture<B: Backbone>(
        backbone: &B,
        stage: &str,
        global_step: usize,
        metadata: serde_json::Value,
    ) -> Self {
        let parameters = backbone
            .params()
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.to_string(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                backbone: backbone.config_json(),
                attention_scope: backbone.attention_scope().to_string(),
                parameters,
                spans: backbone.spans().to_vec(),
                stage: stage.to_string(),
                global_step,
                metadata,
            },
            params: backbone.params().clone(),
        }
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for entry in &self.header.parameters {
            for v in self.params.get(&entry.name)?.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)
            .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
        let len = u32::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        r = &r[len..];
        let mut params = ParamStore::new();
        for entry in &header.parameters {
            let n: usize = entry.shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated data for {}", entry.name)));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[n * 8..];
            params.insert(&entry.name, entry.group, Tensor::new(entry.shape.clone(), data)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, params })
    }

    /// Writes via a temporary file and rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(format!("checkpoint {}", path.display())));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_toy(&self) -> Result<ToyBackbone> {
        let config: ToyModelConfig = serde_json::from_value(self.header.backbone.clone())?;
        ToyBackbone::from_parts(config, self.params.clone(), self.header.spans.clone())
    }
}
