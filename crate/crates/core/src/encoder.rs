//! Toy vision-language backbone, summarization-token adapter and projector.
//!
//! All functions work on a batch: a token sequence of `B` samples with `N`
//! tokens each is stored as a `(B·N) × d_model` matrix, sample-major.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub views: usize,
    pub view_dim: usize,
    pub n_tok: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_proj: usize,
    pub n_instructions: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            views: 2,
            view_dim: 16,
            n_tok: 4,
            d_model: 32,
            d_hidden: 64,
            d_proj: 16,
            n_instructions: 2,
        }
    }
}

impl EncoderDims {
    /// Content tokens per sample: every view's tokens plus the instruction.
    pub fn content_tokens(&self) -> usize {
        self.views * self.n_tok + 1
    }
}

/// Owner of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenTag {
    /// Zero-based view index.
    View(usize),
    Instruction,
    Summarization,
}

/// A batch of token sequences living in a graph.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `(batch · len) × d_model`
    pub tokens: Var,
    pub batch: usize,
    /// Per-sample owner tags; identical for every sample.
    pub view_map: Vec<TokenTag>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.view_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view_map.is_empty()
    }

    pub fn num_views(&self) -> usize {
        self.view_map
            .iter()
            .filter_map(|t| match t {
                TokenTag::View(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn has_summarization(&self) -> bool {
        self.view_map.contains(&TokenTag::Summarization)
    }
}

/// Raw inputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    /// One `B × view_dim` matrix per view.
    pub views: Vec<Tensor>,
    pub instructions: Vec<usize>,
}

impl EncoderInput {
    pub fn batch(&self) -> usize {
        self.instructions.len()
    }
}

pub fn init_encoder<R: Rng>(p: &mut ParamStore, dims: &EncoderDims, rng: &mut R) {
    let d = dims.d_model;
    for i in 1..=dims.views {
        p.init_weight(&format!("backbone.view{i}.W"), dims.view_dim, dims.n_tok * d, rng);
        p.init_bias(&format!("backbone.view{i}.b"), dims.view_dim, dims.n_tok * d, rng);
    }
    p.init_normal("backbone.instr.E", &[dims.n_instructions, d], 1.0, rng);
    for name in ["Wq", "Wk", "Wv", "Wo"] {
        p.init_weight(&format!("adapter.attn.{name}"), d, d, rng);
    }
    p.init_weight("adapter.l1.W", d, d, rng);
    p.init_bias("adapter.l1.b", d, d, rng);
    p.init_weight("adapter.l2.W", d, d, rng);
    p.init_bias("adapter.l2.b", d, d, rng);
    p.init_normal("adapter.u", &[1, d], 0.02, rng);
    p.init_weight("projector.l1.W", d, dims.d_hidden, rng);
    p.init_bias("projector.l1.b", d, dims.d_hidden, rng);
    p.init_weight("projector.l2.W", dims.d_hidden, dims.d_proj, rng);
    p.init_bias("projector.l2.b", dims.d_hidden, dims.d_proj, rng);
}

/// Zeroes the residual branches of the adapter so it computes the identity.
pub fn set_adapter_identity(p: &mut ParamStore) -> Result<()> {
    for name in ["adapter.attn.Wo", "adapter.l2.W", "adapter.l2.b"] {
        p.get_mut(name)?.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// Per-view linear tokenization with tanh, then the instruction embedding.
/// Token order per sample: view 1 tokens, …, view V tokens, instruction.
pub fn backbone_forward(
    g: &mut Graph,
    p: &BoundParams,
    dims: &EncoderDims,
    input: &EncoderInput,
) -> Result<TokenSequence> {
    let b = input.batch();
    if input.views.len() != dims.views {
        return Err(Error::InvalidArgument(format!(
            "expected {} views, got {}",
            dims.views,
            input.views.len()
        )));
    }
    if let Some(&bad) = input.instructions.iter().find(|&&i| i >= dims.n_instructions) {
        return Err(Error::InvalidArgument(format!("unknown instruction id {bad}")));
    }
    let d = dims.d_model;
    let mut parts = Vec::with_capacity(dims.views + 1);
    for (i, raw) in input.views.iter().enumerate() {
        if raw.shape() != [b, dims.view_dim] {
            return Err(Error::InvalidArgument(format!(
                "view {} has shape {:?}, expected [{b}, {}]",
                i + 1,
                raw.shape(),
                dims.view_dim
            )));
        }
        let x = g.constant(raw.clone())?;
        let w = p.var(&format!("backbone.view{}.W", i + 1))?;
        let bias = p.var(&format!("backbone.view{}.b", i + 1))?;
        let lin = g.matmul(x, w)?;
        let lin = g.add_row(lin, bias)?;
        let act = g.tanh(lin)?;
        parts.push(g.reshape(act, &[b * dims.n_tok, d])?);
    }
    let instr = g.gather_rows(p.var("backbone.instr.E")?, &input.instructions)?;
    parts.push(instr);
    let stacked = g.concat_rows(&parts)?;

    let n = dims.content_tokens();
    let mut order = Vec::with_capacity(b * n);
    for s in 0..b {
        for v in 0..dims.views {
            for t in 0..dims.n_tok {
                order.push(v * b * dims.n_tok + s * dims.n_tok + t);
            }
        }
        order.push(dims.views * b * dims.n_tok + s);
    }
    let tokens = g.gather_rows(stacked, &order)?;

    let mut view_map = Vec::with_capacity(n);
    for v in 0..dims.views {
        view_map.extend(std::iter::repeat(TokenTag::View(v)).take(dims.n_tok));
    }
    view_map.push(TokenTag::Instruction);
    Ok(TokenSequence {
        tokens,
        batch: b,
        view_map,
    })
}

/// Output of [`adapter_forward`].
#[derive(Debug, Clone)]
pub struct AdapterOutput {
    /// Content-token outputs, the decoder's conditioning input.
    pub h: TokenSequence,
    /// Summarization-token output, `B × d_model`.
    pub w: Var,
}

/// Appends the summarization token `u` to every sample and applies the
/// adapter: one residual self-attention layer followed by a residual
/// token-wise two-layer MLP.
pub fn adapter_forward(g: &mut Graph, p: &BoundParams, seq: &TokenSequence) -> Result<AdapterOutput> {
    if seq.has_summarization() {
        return Err(Error::InvalidArgument(
            "summarization token already appended".into(),
        ));
    }
    let b = seq.batch;
    let n = seq.len();
    let u = p.var("adapter.u")?;
    let d = g.value(u).cols();
    let us = g.gather_rows(u, &vec![0; b])?;
    let joined = g.concat_rows(&[seq.tokens, us])?;
    let mut order = Vec::with_capacity(b * (n + 1));
    for s in 0..b {
        order.extend(s * n..(s + 1) * n);
        order.push(b * n + s);
    }
    let x = g.gather_rows(joined, &order)?;

    let q = g.matmul(x, p.var("adapter.attn.Wq")?)?;
    let k = g.matmul(x, p.var("adapter.attn.Wk")?)?;
    let v = g.matmul(x, p.var("adapter.attn.Wv")?)?;
    let att = g.block_attention(q, k, v, n + 1, 1.0 / (d as f64).sqrt())?;
    let att = g.matmul(att, p.var("adapter.attn.Wo")?)?;
    let x1 = g.add(x, att)?;

    let hid = g.matmul(x1, p.var("adapter.l1.W")?)?;
    let hid = g.add_row(hid, p.var("adapter.l1.b")?)?;
    let hid = g.tanh(hid)?;
    let out = g.matmul(hid, p.var("adapter.l2.W")?)?;
    let out = g.add_row(out, p.var("adapter.l2.b")?)?;
    let x2 = g.add(x1, out)?;

    let mut content = Vec::with_capacity(b * n);
    let mut summary = Vec::with_capacity(b);
    for s in 0..b {
        content.extend(s * (n + 1)..s * (n + 1) + n);
        summary.push(s * (n + 1) + n);
    }
    let h = g.gather_rows(x2, &content)?;
    let w = g.gather_rows(x2, &summary)?;
    Ok(AdapterOutput {
        h: TokenSequence {
            tokens: h,
            batch: b,
            view_map: seq.view_map.clone(),
        },
        w,
    })
}

/// Two-layer projector with a tanh hidden layer; the output is not normalized.
pub fn project(g: &mut Graph, p: &BoundParams, w: Var) -> Result<Var> {
    let hid = g.matmul(w, p.var("projector.l1.W")?)?;
    let hid = g.add_row(hid, p.var("projector.l1.b")?)?;
    let hid = g.tanh(hid)?;
    let z = g.matmul(hid, p.var("projector.l2.W")?)?;
    Ok(g.add_row(z, p.var("projector.l2.b")?)?)
}

/// Token-mean of each sample's content tokens: `B × d_model`.
pub fn pool(g: &mut Graph, h: &TokenSequence) -> Result<Var> {
    Ok(g.mean_row_blocks(h.tokens, h.len())?)
}
