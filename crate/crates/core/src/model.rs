//! Model configuration, the flat parameter layout and the immutable bundle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub use_final_norm: bool,
    pub tie_embeddings: bool,
    pub activation: Activation,
}

impl ModelConfig {
    /// Pre-LN config with learned norms and an untied unembedding.
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, max_seq: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads.max(1),
            vocab_size,
            max_seq,
            norm_kind: NormKind::LayerNorm,
            use_final_norm: true,
            tie_embeddings: false,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::spec(name, "must be >= 1"));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::spec(
                "d_head",
                format!(
                    "n_heads ({}) x d_head ({}) must equal d_model ({})",
                    self.n_heads, self.d_head, self.d_model
                ),
            ));
        }
        if self.max_seq < 2 {
            return Err(Error::spec("max_seq", "must be >= 2"));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    fn has_gamma(&self) -> bool {
        self.norm_kind != NormKind::Identity
    }

    fn has_beta(&self) -> bool {
        self.norm_kind == NormKind::LayerNorm
    }
}

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub norm1_g: Option<usize>,
    pub norm1_b: Option<usize>,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub norm2_g: Option<usize>,
    pub norm2_b: Option<usize>,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

/// Storage order of every parameter, which is also the on-disk order.
/// With tied embeddings the unembedding aliases the token embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) final_g: Option<usize>,
    pub(crate) final_b: Option<usize>,
    pub(crate) unembed: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors: Vec<TensorSpec> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| -> usize {
            tensors.push(TensorSpec {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
            tensors.len() - 1
        };
        let d = cfg.d_model;
        let tok_emb = push("tok_emb".into(), cfg.vocab_size, d);
        let pos_emb = push("pos_emb".into(), cfg.max_seq, d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let norm1_g = cfg.has_gamma().then(|| push(p("norm1.gamma"), 1, d));
            let norm1_b = cfg.has_beta().then(|| push(p("norm1.beta"), 1, d));
            let w_q = push(p("w_q"), d, d);
            let w_k = push(p("w_k"), d, d);
            let w_v = push(p("w_v"), d, d);
            let w_o = push(p("w_o"), d, d);
            let norm2_g = cfg.has_gamma().then(|| push(p("norm2.gamma"), 1, d));
            let norm2_b = cfg.has_beta().then(|| push(p("norm2.beta"), 1, d));
            let w_in = push(p("w_in"), d, cfg.d_ff());
            let b_in = push(p("b_in"), 1, cfg.d_ff());
            let w_out = push(p("w_out"), cfg.d_ff(), d);
            let b_out = push(p("b_out"), 1, d);
            layers.push(LayerSlots {
                norm1_g,
                norm1_b,
                w_q,
                w_k,
                w_v,
                w_o,
                norm2_g,
                norm2_b,
                w_in,
                b_in,
                w_out,
                b_out,
            });
        }
        let final_norm = cfg.use_final_norm;
        let final_g = (final_norm && cfg.has_gamma()).then(|| push("final_norm.gamma".into(), 1, d));
        let final_b = (final_norm && cfg.has_beta()).then(|| push("final_norm.beta".into(), 1, d));
        let unembed = if cfg.tie_embeddings {
            tok_emb
        } else {
            push("unembed".into(), cfg.vocab_size, d)
        };
        Self {
            tensors,
            tok_emb,
            pos_emb,
            layers,
            final_g,
            final_b,
            unembed,
            total: offset,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn spec(&self, idx: usize) -> &TensorSpec {
        &self.tensors[idx]
    }

    pub(crate) fn get<'a, T>(&self, params: &'a [T], idx: usize) -> &'a [T] {
        &params[self.tensors[idx].range()]
    }

    pub(crate) fn get_opt<'a, T>(&self, params: &'a [T], idx: Option<usize>) -> Option<&'a [T]> {
        idx.map(|i| self.get(params, i))
    }

    pub(crate) fn get_mut<'a, T>(&self, params: &'a mut [T], idx: usize) -> &'a mut [T] {
        &mut params[self.tensors[idx].range()]
    }
}

/// Configuration, weights and tokenizer of one decoder-only transformer.
/// Immutable once built; share it behind an `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f32>,
    tokenizer: Tokenizer,
    model_id: String,
}

impl ModelBundle {
    pub fn new(
        model_id: impl Into<String>,
        config: ModelConfig,
        tokenizer: Tokenizer,
        params: Vec<f32>,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.len() != config.vocab_size {
            return Err(Error::spec(
                "vocab_size",
                format!(
                    "config says {} but tokenizer has {} entries",
                    config.vocab_size,
                    tokenizer.len()
                ),
            ));
        }
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        if let Some(t) = layout
            .tensors()
            .iter()
            .find(|t| params[t.range()].iter().any(|v| !v.is_finite()))
        {
            return Err(Error::format(t.name.clone(), "non-finite weight"));
        }
        Ok(Self {
            config,
            layout,
            params,
            tokenizer,
            model_id: model_id.into(),
        })
    }

    /// Random initialisation: N(0, 0.02²) matrices, residual output
    /// projections scaled by `1/sqrt(2L)`, unit gains and zero biases.
    pub fn random(model_id: impl Into<String>, config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0f32; layout.total()];
        let mut rng = Rng::new(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        for t in layout.tensors() {
            let name = t.name.as_str();
            let slot = &mut params[t.range()];
            if name.ends_with("gamma") {
                slot.fill(1.0);
            } else if name.ends_with("beta") || name.ends_with("b_in") || name.ends_with("b_out") {
                slot.fill(0.0);
            } else {
                let s = if name.ends_with("w_o") || name.ends_with("w_out") {
                    resid_std
                } else {
                    std
                };
                for v in slot.iter_mut() {
                    *v = (s * rng.standard_normal()) as f32;
                }
            }
        }
        Self::new(model_id, config, tokenizer, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout.find(name).map(|t| &self.params[t.range()])
    }

    /// Same weights under a new id.
    pub fn with_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    /// Replaces the parameter buffer (same layout).
    pub fn with_params(&self, params: Vec<f32>) -> Result<Self> {
        Self::new(self.model_id.clone(), self.config.clone(), self.tokenizer.clone(), params)
    }

    /// CRC32 of the little-endian parameter bytes.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in &self.params {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.tokenizer.tokenize(text)
    }

    /// `<bos>` followed by the tokenized text: the id sequence every prompt
    /// and training line is run on. Positions on all surfaces index into it.
    pub fn encode_prompt(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![crate::tokenizer::BOS_ID];
        ids.extend(self.tokenizer.tokenize(text));
        ids
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        self.tokenizer.detokenize(ids)
    }

    /// Empirical standard deviation over all token-embedding entries.
    pub fn embedding_std(&self) -> f64 {
        let emb = self.layout.get(&self.params, self.layout.tok_emb);
        let n = emb.len() as f64;
        let mean = emb.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        (emb.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}
