//! Layers shared by the detector, the audio encoder, the fusion module and the
//! language encoder. Each layer only holds [`ParamId`]s; values live in a
//! [`ParamStore`] and are bound into a [`Graph`] on each forward pass.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{AttnSegment, Graph, ParamId, ParamStore, ParamTag, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        tag: ParamTag,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_weight(format!("{name}.w"), tag, fan_in, fan_out, rng);
        let b = store.add_const(format!("{name}.b"), tag, &[fan_out], 0.0);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, tag: ParamTag, d: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), tag, &[d], 1.0),
            bias: store.add_const(format!("{name}.bias"), tag, &[d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Affine, GELU, affine.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        tag: ParamTag,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), tag, d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), tag, hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, tag: ParamTag, d: usize, heads: usize, rng: &mut R) -> Self {
        assert!(
            heads > 0 && d.is_multiple_of(heads),
            "d_model {d} not divisible by {heads} heads"
        );
        Self {
            query: Linear::new(store, &format!("{name}.q"), tag, d, d, rng),
            key: Linear::new(store, &format!("{name}.k"), tag, d, d, rng),
            value: Linear::new(store, &format!("{name}.v"), tag, d, d, rng),
            out: Linear::new(store, &format!("{name}.o"), tag, d, d, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        segments: &[AttnSegment],
    ) -> Result<Var> {
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, keys)?;
        let v = self.value.forward(g, store, keys)?;
        let a = g.attention(q, k, v, segments, self.heads)?;
        self.out.forward(g, store, a)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        tag: ParamTag,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln1"), tag, d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), tag, d, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln2"), tag, d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), tag, d, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &[AttnSegment]) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, segments)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(x, f)
    }
}

/// A stack of pre-norm blocks followed by a final layer norm. Sequences are
/// packed row-wise; `lengths` gives each sequence's row count in order.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        tag: ParamTag,
        d: usize,
        heads: usize,
        hidden: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), tag, d, heads, hidden, rng))
            .collect();
        Self {
            blocks,
            ln_final: LayerNorm::new(store, &format!("{name}.ln_final"), tag, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, lengths: &[usize]) -> Result<Var> {
        let segments = packed_segments(lengths);
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h, &segments)?;
        }
        self.ln_final.forward(g, store, h)
    }
}

/// Self-attention segments for sequences packed back to back.
pub fn packed_segments(lengths: &[usize]) -> Vec<AttnSegment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&l| {
            let s = AttnSegment::within(start, l);
            start += l;
            s
        })
        .collect()
}
