//! The backbone seam: a text encoder plus a conditional clean-sample denoiser
//! with group-tagged parameters. The toy model implements it; a pretrained
//! model can too, provided it can report reconstruction-loss gradients.

use crate::autograd::ParamGrads;
use crate::embedding::StyleIdentifierSpan;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::schedule::LatentSample;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

/// Encoded prompt. `styled` records whether the prompt carried a style identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub vectors: Tensor,
    pub styled: bool,
}

impl Conditioning {
    pub fn new(vectors: Tensor, styled: bool) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.shape()[0] == 0 {
            return Err(Error::invalid(format!(
                "conditioning must be a non-empty (sequence, dim) matrix, got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::invalid("conditioning contains non-finite entries"));
        }
        Ok(Self { vectors, styled })
    }

    pub fn sequence_length(&self) -> usize {
        self.vectors.shape()[0]
    }
}

/// One reconstruction term `weight * ||denoise(noisy, encode(tokens)) - target||^2`
/// contributing `scale * term` to the objective being differentiated.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'a> {
    pub noisy: &'a LatentSample,
    pub token_ids: &'a [usize],
    pub target: &'a Tensor,
    pub weight: f64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct LossGradients {
    /// Unscaled value of each term, in input order.
    pub losses: Vec<f64>,
    pub grads: ParamGrads,
}

pub trait Backbone: Clone {
    fn latent_shape(&self) -> [usize; 3];
    fn embed_dim(&self) -> usize;
    fn tokenizer(&self) -> &dyn Tokenizer;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Name of the `[vocab, embed_dim]` token lookup table in the registry.
    fn embedding_table(&self) -> &str;

    fn spans(&self) -> &[StyleIdentifierSpan];
    fn spans_mut(&mut self) -> &mut Vec<StyleIdentifierSpan>;

    fn encode_text(&self, token_ids: &[usize]) -> Result<Conditioning>;
    fn denoise(&self, noisy: &LatentSample, conditioning: &Conditioning) -> Result<Tensor>;
    fn loss_gradients(&self, terms: &[LossTerm<'_>]) -> Result<LossGradients>;

    /// Free-form description of which tensors the attention groups cover.
    fn attention_scope(&self) -> &str;

    /// Backbone configuration, persisted in checkpoint headers.
    fn config_json(&self) -> serde_json::Value;

    fn vocab_size(&self) -> usize {
        self.params().tensor(self.embedding_table()).shape()[0]
    }

    fn fingerprint(&self) -> String {
        self.params().fingerprint()
    }

    fn check_token_ids(&self, token_ids: &[usize]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        let vocab = self.vocab_size();
        if let Some(bad) = token_ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Range(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    /// Raw lookup rows, before any positional or attention mixing.
    fn token_embeddings(&self, token_ids: &[usize]) -> Result<Tensor> {
        self.check_token_ids(token_ids)?;
        let table = self.params().tensor(self.embedding_table());
        let d = table.shape()[1];
        let mut data = Vec::with_capacity(token_ids.len() * d);
        for &id in token_ids {
            data.extend_from_slice(table.row(id));
        }
        Tensor::new(vec![token_ids.len(), d], data)
    }

    /// Replaces parameters and spans with saved state. Names, groups and
    /// shapes must match, except that the embedding table may have more rows.
    fn load_state(&mut self, params: &ParamStore, spans: &[StyleIdentifierSpan]) -> Result<()> {
        if params.len() != self.params().len() {
            return Err(Error::Checkpoint("parameter count does not match backbone".into()));
        }
        let table = self.embedding_table().to_string();
        for (name, current) in self.params().iter() {
            let loaded = params.get(name)?;
            let (a, b) = (loaded.value.shape(), current.value.shape());
            let shape_ok = if name == table {
                a.len() == 2 && a[1] == b[1]
            } else {
                a == b
            };
            if loaded.group != current.group || !shape_ok {
                return Err(Error::Checkpoint(format!("parameter {name} does not match backbone")));
            }
        }
        *self.params_mut() = params.clone();
        *self.spans_mut() = spans.to_vec();
        Ok(())
    }

    fn is_styled(&self, token_ids: &[usize]) -> bool {
        self.spans()
            .iter()
            .any(|s| token_ids.iter().any(|id| s.token_ids.contains(id)))
    }
}
