use serde::{Deserialize, Serialize};

use super::tokenizer::BYTE_VOCAB;
use super::LmError;

/// Shape of the micro transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> usize {
    BYTE_VOCAB
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_layers: 2, d_model: 64, n_heads: 4, d_ff: 256, vocab_size: BYTE_VOCAB, max_seq_len: 192, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("n_layers, d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("n_heads ({}) must divide d_model ({})", self.n_heads, self.d_model));
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        if self.vocab_size < BYTE_VOCAB {
            return bad(format!("vocab_size must be at least {BYTE_VOCAB}"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Layer probed when no search is configured: ⌈n_layers / 2⌉.
    pub fn default_probe_layer(&self) -> usize {
        self.n_layers.div_ceil(2)
    }
}

/// A named parameter tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_attn_out: usize,
    pub b_attn_out: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Offsets of every tensor in the flat parameter buffer.
///
/// Order: `tok_emb [V,D]`, `pos_emb [T,D]`, then per block `ln1.g`, `ln1.b`,
/// `attn.w_qkv [D,3D]`, `attn.b_qkv`, `attn.w_out [D,D]`, `attn.b_out`,
/// `ln2.g`, `ln2.b`, `mlp.w_fc [D,F]`, `mlp.b_fc`, `mlp.w_proj [F,D]`,
/// `mlp.b_proj`, and finally `lnf.g`, `lnf.b`, `head.w [D,V]`, `head.b`.
/// Weight matrices are row-major `[in, out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_head: usize,
    pub b_head: usize,
    pub total: usize,
    pub tensors: Vec<TensorSpec>,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Layout {
        let mut tensors: Vec<TensorSpec> = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset: total };
            total += spec.len();
            let off = spec.offset;
            tensors.push(spec);
            off
        };
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![c.max_seq_len, d]);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.g"), vec![d]),
                ln1_b: push(p("ln1.b"), vec![d]),
                w_qkv: push(p("attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: push(p("attn.b_qkv"), vec![3 * d]),
                w_attn_out: push(p("attn.w_out"), vec![d, d]),
                b_attn_out: push(p("attn.b_out"), vec![d]),
                ln2_g: push(p("ln2.g"), vec![d]),
                ln2_b: push(p("ln2.b"), vec![d]),
                w_fc: push(p("mlp.w_fc"), vec![d, f]),
                b_fc: push(p("mlp.b_fc"), vec![f]),
                w_proj: push(p("mlp.w_proj"), vec![f, d]),
                b_proj: push(p("mlp.b_proj"), vec![d]),
            });
        }
        let lnf_g = push("lnf.g".into(), vec![d]);
        let lnf_b = push("lnf.b".into(), vec![d]);
        let w_head = push("head.w".into(), vec![d, v]);
        let b_head = push("head.b".into(), vec![v]);
        Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b, w_head, b_head, total, tensors }
    }
}
