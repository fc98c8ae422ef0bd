//! Desk-scale backbone: embedding lookup + one self-attention block for text,
//! and a small conv encoder-decoder with a cross-attention bottleneck for
//! denoising. It works directly on pixel latents in `[-1, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::backbone::{Backbone, Conditioning, LossGradients, LossTerm};
use crate::embedding::StyleIdentifierSpan;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::schedule::LatentSample;
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, WordPieceTokenizer};

pub const TOKEN_EMBEDDING: &str = "text.token_embedding";

const ATTENTION_SCOPE: &str =
    "all tensors inside attention blocks: query/key/value/output projection weights and biases";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub embed_dim: usize,
    pub latent_shape: [usize; 3],
    pub vocab_size: usize,
    pub num_attention_heads: usize,
    pub hidden_channels: usize,
    pub max_text_len: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            latent_shape: [3, 16, 16],
            vocab_size: WordPieceTokenizer::fixture().vocab_size(),
            num_attention_heads: 4,
            hidden_channels: 16,
            max_text_len: 64,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.embed_dim == 0 || self.num_attention_heads == 0 || self.hidden_channels == 0 {
            return bad("embed_dim, num_attention_heads and hidden_channels must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_attention_heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_attention_heads
            ));
        }
        let [c, h, w] = self.latent_shape;
        if c == 0 || h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return bad(format!("latent shape {:?} needs positive channels and even sides", self.latent_shape));
        }
        let needed = WordPieceTokenizer::fixture().vocab_size();
        if self.vocab_size < needed {
            return bad(format!("vocab_size {} smaller than the tokenizer's {needed}", self.vocab_size));
        }
        if self.max_text_len == 0 {
            return bad("max_text_len must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    config: ToyModelConfig,
    tokenizer: WordPieceTokenizer,
    params: ParamStore,
    spans: Vec<StyleIdentifierSpan>,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, group: ParamGroup, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.store.insert(name, group, Tensor::new(shape.to_vec(), data)?)
    }

    fn zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> Result<()> {
        self.store.insert(name, group, Tensor::zeros(shape))
    }

    /// `[fan_in, fan_out]` weight plus `[fan_out]` bias.
    fn linear(&mut self, prefix: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Result<()> {
        self.normal(&format!("{prefix}.weight"), group, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())?;
        self.zeros(&format!("{prefix}.bias"), group, &[fan_out])
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize) -> Result<()> {
        let fan_in = c_in * 9;
        self.normal(
            &format!("{prefix}.weight"),
            ParamGroup::DenoiserOther,
            &[c_out, c_in, 3, 3],
            (2.0 / fan_in as f64).sqrt(),
        )?;
        self.zeros(&format!("{prefix}.bias"), ParamGroup::DenoiserOther, &[c_out])
    }
}

impl ToyBackbone {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let ch = config.hidden_channels;
        let [c_lat, _, _] = config.latent_shape;
        let mut params = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            store: &mut params,
        };
        use ParamGroup::*;
        init.normal(TOKEN_EMBEDDING, TokenEmbedding, &[config.vocab_size, d], 0.5)?;
        init.normal("text.position_embedding", TextOther, &[config.max_text_len, d], 0.1)?;
        for p in ["q", "k", "v", "out"] {
            init.linear(&format!("text.attn.{p}"), TextAttention, d, d)?;
        }
        init.linear("text.proj", TextOther, d, d)?;

        init.linear("unet.time", DenoiserOther, d, ch)?;
        init.conv("unet.conv_in", ch, c_lat)?;
        init.conv("unet.down", ch, ch)?;
        init.linear("unet.cross_attn.q", DenoiserAttention, ch, d)?;
        init.linear("unet.cross_attn.k", DenoiserAttention, d, d)?;
        init.linear("unet.cross_attn.v", DenoiserAttention, d, d)?;
        init.linear("unet.cross_attn.out", DenoiserAttention, d, ch)?;
        init.conv("unet.conv_mid", ch, ch)?;
        init.conv("unet.conv_out", c_lat, ch)?;

        Ok(Self {
            config,
            tokenizer: WordPieceTokenizer::fixture(),
            params,
            spans: Vec::new(),
        })
    }

    /// Rebuilds a backbone from saved state; shapes must match the config.
    pub fn from_parts(config: ToyModelConfig, params: ParamStore, spans: Vec<StyleIdentifierSpan>) -> Result<Self> {
        let template = Self::new(config.clone())?;
        for (name, p) in template.params.iter() {
            let loaded = params.get(name)?;
            let rows_may_grow = name == TOKEN_EMBEDDING;
            let ok = loaded.group == p.group
                && if rows_may_grow {
                    loaded.value.shape()[1] == p.value.shape()[1]
                        && loaded.value.shape()[0] >= p.value.shape()[0]
                } else {
                    loaded.value.shape() == p.value.shape()
                };
            if !ok {
                return Err(Error::Checkpoint(format!("parameter {name} does not match config")));
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint("unexpected parameters in checkpoint".into()));
        }
        Ok(Self {
            config,
            tokenizer: template.tokenizer,
            params,
            spans,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    fn p(&self, g: &mut Graph, name: &str) -> NodeId {
        g.param(name, self.params.tensor(name))
    }

    fn lin(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
        let w = self.p(g, &format!("{prefix}.weight"));
        let b = self.p(g, &format!("{prefix}.bias"));
        g.linear(x, w, b)
    }

    fn conv(&self, g: &mut Graph, x: NodeId, prefix: &str, stride: usize) -> NodeId {
        let w = self.p(g, &format!("{prefix}.weight"));
        let b = self.p(g, &format!("{prefix}.bias"));
        g.conv2d(x, w, b, stride)
    }

    fn text_graph(&self, g: &mut Graph, token_ids: &[usize]) -> Result<NodeId> {
        self.check_token_ids(token_ids)?;
        if token_ids.len() > self.config.max_text_len {
            return Err(Error::invalid(format!(
                "prompt has {} tokens, limit is {}",
                token_ids.len(),
                self.config.max_text_len
            )));
        }
        let table = self.p(g, TOKEN_EMBEDDING);
        let tokens = g.gather(table, token_ids);
        let pos_table = self.p(g, "text.position_embedding");
        let positions: Vec<usize> = (0..token_ids.len()).collect();
        let pos = g.gather(pos_table, &positions);
        let h = g.add(tokens, pos);
        let q = self.lin(g, h, "text.attn.q");
        let k = self.lin(g, h, "text.attn.k");
        let v = self.lin(g, h, "text.attn.v");
        let a = g.attention(q, k, v, self.config.num_attention_heads);
        let a = self.lin(g, a, "text.attn.out");
        let h = g.add(h, a);
        Ok(self.lin(g, h, "text.proj"))
    }

    fn timestep_features(&self, t: usize) -> Tensor {
        let d = self.config.embed_dim;
        let half = d / 2;
        let mut data = vec![0.0; d];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data[i] = (t as f64 * freq).sin();
            data[half + i] = (t as f64 * freq).cos();
        }
        Tensor::from_parts(vec![1, d], data)
    }

    fn denoise_graph(&self, g: &mut Graph, noisy: &LatentSample, cond: NodeId) -> Result<NodeId> {
        if noisy.data.shape() != self.config.latent_shape {
            return Err(Error::invalid(format!(
                "latent shape {:?} does not match backbone {:?}",
                noisy.data.shape(),
                self.config.latent_shape
            )));
        }
        let [_, h, w] = self.config.latent_shape;
        let x = g.constant(noisy.data.clone());
        let tf = g.constant(self.timestep_features(noisy.timestep));
        let temb = self.lin(g, tf, "unet.time");
        let temb = g.silu(temb);
        let h1 = self.conv(g, x, "unet.conv_in", 1);
        // temb is [1, ch]; broadcast over every spatial position
        let h1 = g.add_channel(h1, temb);
        let h1 = g.silu(h1);
        let h2 = self.conv(g, h1, "unet.down", 2);
        let h2 = g.silu(h2);
        let tokens = g.chw_to_tokens(h2);
        let q = self.lin(g, tokens, "unet.cross_attn.q");
        let k = self.lin(g, cond, "unet.cross_attn.k");
        let v = self.lin(g, cond, "unet.cross_attn.v");
        let a = g.attention(q, k, v, self.config.num_attention_heads);
        let a = self.lin(g, a, "unet.cross_attn.out");
        let tokens = g.add(tokens, a);
        let h3 = g.tokens_to_chw(tokens, h / 2, w / 2);
        let up = g.upsample2x(h3);
        let h4 = g.add(up, h1);
        let h5 = self.conv(g, h4, "unet.conv_mid", 1);
        let h5 = g.silu(h5);
        Ok(self.conv(g, h5, "unet.conv_out", 1))
    }
}

impl Backbone for ToyBackbone {
    fn latent_shape(&self) -> [usize; 3] {
        self.config.latent_shape
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn embedding_table(&self) -> &str {
        TOKEN_EMBEDDING
    }

    fn spans(&self) -> &[StyleIdentifierSpan] {
        &self.spans
    }

    fn spans_mut(&mut self) -> &mut Vec<StyleIdentifierSpan> {
        &mut self.spans
    }

    fn encode_text(&self, token_ids: &[usize]) -> Result<Conditioning> {
        let mut g = Graph::new();
        let out = self.text_graph(&mut g, token_ids)?;
        Conditioning::new(g.value(out).clone(), self.is_styled(token_ids))
    }

    fn denoise(&self, noisy: &LatentSample, conditioning: &Conditioning) -> Result<Tensor> {
        if conditioning.vectors.shape()[1] != self.config.embed_dim {
            return Err(Error::invalid("conditioning width does not match embed_dim"));
        }
        let mut g = Graph::new();
        let cond = g.constant(conditioning.vectors.clone());
        let out = self.denoise_graph(&mut g, noisy, cond)?;
        Ok(g.value(out).clone())
    }

    fn loss_gradients(&self, terms: &[LossTerm<'_>]) -> Result<LossGradients> {
        let mut g = Graph::new();
        let mut seeds = Vec::with_capacity(terms.len());
        let mut losses = Vec::with_capacity(terms.len());
        for term in terms {
            term.noisy.data.ensure_same_shape(term.target)?;
            let cond = self.text_graph(&mut g, term.token_ids)?;
            let pred = self.denoise_graph(&mut g, term.noisy, cond)?;
            let loss = g.squared_error(pred, term.target, term.weight);
            losses.push(g.value(loss).data()[0]);
            seeds.push((loss, term.scale));
        }
        Ok(LossGradients {
            losses,
            grads: g.backward(&seeds),
        })
    }

    fn attention_scope(&self) -> &str {
        ATTENTION_SCOPE
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("toy config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(b: &ToyBackbone, text: &str) -> Conditioning {
        b.encode_text(&b.tokenizer().tokenize(text)).unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        let a = ToyBackbone::new(ToyModelConfig::default()).unwrap();
        let b = ToyBackbone::new(ToyModelConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
        let c = ToyBackbone::new(ToyModelConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            ToyModelConfig {
                num_attention_heads: 5,
                ..Default::default()
            },
            ToyModelConfig {
                latent_shape: [3, 15, 16],
                ..Default::default()
            },
            ToyModelConfig {
                vocab_size: 3,
                ..Default::default()
            },
        ] {
            assert!(matches!(ToyBackbone::new(cfg), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn groups_partition_parameters() {
        let b = ToyBackbone::new(ToyModelConfig::default()).unwrap();
        let mut total = 0;
        for g in ParamGroup::ALL {
            let names = b.params.names_in(g);
            assert!(!names.is_empty(), "{g} empty");
            total += names.len();
        }
        assert_eq!(total, b.params.len());
    }

    #[test]
    fn encode_shapes_and_errors() {
        let b = ToyBackbone::new(ToyModelConfig::default()).unwrap();
        assert!(matches!(b.encode_text(&[]), Err(Error::InvalidArgument(_))));
        let vocab = b.vocab_size();
        assert!(matches!(b.encode_text(&[1, vocab]), Err(Error::Range(_))));
        let c = b.encode_text(&[1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(c.sequence_length(), 6);
        assert!(!c.styled);
        let e = b.token_embeddings(&[5, 7, 5]).unwrap();
        assert_eq!(e.row(0), e.row(2));
        assert_ne!(e.row(0), e.row(1));
    }

    #[test]
    fn denoise_shape_and_determinism() {
        let b = ToyBackbone::new(ToyModelConfig::default()).unwrap();
        let c = cond(&b, "a photo of a car");
        let x = LatentSample::new(Tensor::full(&[3, 16, 16], 0.3), 17).unwrap();
        let y1 = b.denoise(&x, &c).unwrap();
        let y2 = b.denoise(&x, &c).unwrap();
        assert_eq!(y1.shape(), &[3, 16, 16]);
        assert_eq!(y1, y2);
        assert!(y1.is_finite());
        let bad = LatentSample::new(Tensor::zeros(&[3, 8, 8]), 0).unwrap();
        assert!(b.denoise(&bad, &c).is_err());
    }

    #[test]
    fn cross_attention_parameter_is_live() {
        let mut b = ToyBackbone::new(ToyModelConfig::default()).unwrap();
        let c = cond(&b, "an apple with bold stripes");
        let x = LatentSample::new(Tensor::full(&[3, 16, 16], -0.2), 100).unwrap();
        let before = b.denoise(&x, &c).unwrap();
        b.params.get_mut("unet.cross_attn.v.weight").unwrap().value.data_mut()[3] += 1e-3;
        let after = b.denoise(&x, &c).unwrap();
        assert!(before.max_abs_diff(&after) > 0.0);
    }

    #[test]
    fn loss_gradients_match_direct_forward() {
        let b = ToyBackbone::new(ToyModelConfig::default()).unwrap();
        let ids = b.tokenizer().tokenize("a photo of a cat");
        let x = LatentSample::new(Tensor::full(&[3, 16, 16], 0.1), 42).unwrap();
        let target = Tensor::full(&[3, 16, 16], 0.5);
        let term = LossTerm {
            noisy: &x,
            token_ids: &ids,
            target: &target,
            weight: 1.0,
            scale: 1.0,
        };
        let out = b.loss_gradients(&[term]).unwrap();
        let pred = b.denoise(&x, &b.encode_text(&ids).unwrap()).unwrap();
        let direct = crate::schedule::weighted_reconstruction_loss(&pred, &target, 1.0).unwrap();
        assert_eq!(out.losses[0], direct);
        assert_eq!(out.grads.len(), b.params.len());
    }
}
