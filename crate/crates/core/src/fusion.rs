//! Span-restricted cross-attention from text tokens to their span's audio
//! tokens, a feed-forward network, and an element-wise sigmoid gate that
//! mixes the result with the original embeddings.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{FeedForward, MultiHeadAttention};
use crate::tensor::{AttnSegment, Graph, ParamId, ParamStore, ParamTag, Tensor, Var};

/// `g = σ(x·W1 + b1 + z·W2 + b2)`.
#[derive(Clone, Debug)]
pub struct FusionGateParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FusionGateParams {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        let tag = ParamTag::Fusion;
        Self {
            w1: store.add_weight("fusion.gate.w1", tag, d, d, rng),
            b1: store.add_const("fusion.gate.b1", tag, &[d], 0.0),
            w2: store.add_weight("fusion.gate.w2", tag, d, d, rng),
            b2: store.add_const("fusion.gate.b2", tag, &[d], 0.0),
        }
    }

    /// Returns `(z_fused, g)` with `z_fused = g ⊙ x + (1 − g) ⊙ z`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, z: Var) -> Result<(Var, Var)> {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let a = g.matmul(x, w1)?;
        let a = g.add_row(a, b1)?;
        let b = g.matmul(z, w2)?;
        let b = g.add_row(b, b2)?;
        let pre = g.add(a, b)?;
        let gate = g.sigmoid(pre);
        let gx = g.mul(gate, x)?;
        let keep = g.one_minus(gate);
        let gz = g.mul(keep, z)?;
        Ok((g.add(gx, gz)?, gate))
    }
}

#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub gate: FusionGateParams,
    /// When false the gate is bypassed and `z_fused = z_ffn`.
    pub gate_enabled: bool,
}

impl FusionWeights {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        hidden: usize,
        gate_enabled: bool,
        rng: &mut R,
    ) -> Self {
        let tag = ParamTag::Fusion;
        Self {
            attn: MultiHeadAttention::new(store, "fusion.attn", tag, d, heads, rng),
            ffn: FeedForward::new(store, "fusion.ffn", tag, d, hidden, rng),
            gate: FusionGateParams::new(store, d, rng),
            gate_enabled,
        }
    }

    /// Fuses audio into the rows of `x` named by `spans`. Every other row is
    /// copied unchanged.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        audio: Option<Var>,
        spans: &[FusedSpan],
    ) -> Result<FusionOutput> {
        let n = g.value(x).rows();
        let Some(audio) = audio.filter(|_| !spans.is_empty()) else {
            return Ok(FusionOutput {
                out: x,
                gate: None,
                touched: Vec::new(),
            });
        };
        let a_rows = g.value(audio).rows();
        let mut touched = Vec::new();
        let mut segments = Vec::with_capacity(spans.len());
        for s in spans {
            if s.rows.is_empty() || s.rows.iter().any(|&r| r >= n) {
                return Err(Error::Contract(format!(
                    "fused span rows {:?} outside {n} rows",
                    s.rows
                )));
            }
            if s.audio_len == 0 || s.audio_start + s.audio_len > a_rows {
                return Err(Error::Contract(format!(
                    "audio rows {}..{} outside {a_rows}",
                    s.audio_start,
                    s.audio_start + s.audio_len
                )));
            }
            segments.push(AttnSegment {
                q_start: touched.len(),
                q_len: s.rows.len(),
                k_start: s.audio_start,
                k_len: s.audio_len,
            });
            touched.extend_from_slice(&s.rows);
        }
        let xq = g.gather_rows(x, &touched)?;
        let att = self.attn.forward(g, store, xq, audio, &segments)?;
        let z_ffn = self.ffn.forward(g, store, att)?;
        let (fused, gate) = if self.gate_enabled {
            let (f, gv) = self.gate.apply(g, store, xq, z_ffn)?;
            (f, Some(gv))
        } else {
            (z_ffn, None)
        };
        let out = g.scatter_rows(x, fused, &touched)?;
        Ok(FusionOutput { out, gate, touched })
    }
}

/// Rows of the packed text matrix that belong to one accepted span, and the
/// block of audio rows they may attend over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusedSpan {
    pub rows: Vec<usize>,
    pub audio_start: usize,
    pub audio_len: usize,
}

pub struct FusionOutput {
    pub out: Var,
    /// Gate values for the touched rows, in `touched` order.
    pub gate: Option<Var>,
    pub touched: Vec<usize>,
}

impl FusionOutput {
    /// Per-row mean gate over rows `[start, start + len)` of the packed input;
    /// bypassed rows read 1.0.
    pub fn trace(&self, g: &Graph, start: usize, len: usize) -> GateTrace {
        let mut t = vec![1.0; len];
        if let Some(gv) = self.gate {
            let vals = g.value(gv);
            for (k, &r) in self.touched.iter().enumerate() {
                if (start..start + len).contains(&r) {
                    let row = vals.row(k);
                    t[r - start] = row.iter().sum::<f64>() / row.len() as f64;
                }
            }
        }
        GateTrace(t)
    }
}

/// Mean gate value per token; 1.0 means the token kept its text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace(pub Vec<f64>);

impl GateTrace {
    /// CSV with header `token_index,token_string,mean_gate`.
    pub fn write_csv<W: Write, S: AsRef<str>>(&self, mut w: W, tokens: &[S]) -> Result<()> {
        if tokens.len() != self.0.len() {
            return Err(Error::Shape {
                op: "gate trace",
                lhs: vec![self.0.len()],
                rhs: vec![tokens.len()],
            });
        }
        writeln!(w, "token_index,token_string,mean_gate")?;
        for (i, (t, g)) in tokens.iter().zip(&self.0).enumerate() {
            writeln!(w, "{i},{},{g}", t.as_ref())?;
        }
        Ok(())
    }
}

/// Attention over each span's own audio tokens for the span rows; other rows
/// of `x` come back unchanged. `spans` pairs token ranges with `T_a × d`
/// audio matrices.
pub fn fusion_attention(
    x: &Tensor,
    spans: &[(crate::spandet::Span, &Tensor)],
    w: &FusionWeights,
    store: &ParamStore,
) -> Result<Tensor> {
    if spans.is_empty() {
        return Ok(x.clone());
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let mut audio_parts = Vec::new();
    let mut fused = Vec::new();
    let mut at = 0;
    for (s, a) in spans {
        if s.end >= x.rows() {
            return Err(Error::Contract(format!("span {s:?} outside {} rows", x.rows())));
        }
        audio_parts.push(g.leaf((*a).clone()));
        fused.push(FusedSpan {
            rows: s.indices().collect(),
            audio_start: at,
            audio_len: a.rows(),
        });
        at += a.rows();
    }
    let audio = g.concat_rows(&audio_parts)?;
    let touched: Vec<usize> = fused.iter().flat_map(|f| f.rows.iter().copied()).collect();
    let segments: Vec<AttnSegment> = {
        let mut q = 0;
        fused
            .iter()
            .map(|f| {
                let s = AttnSegment {
                    q_start: q,
                    q_len: f.rows.len(),
                    k_start: f.audio_start,
                    k_len: f.audio_len,
                };
                q += f.rows.len();
                s
            })
            .collect()
    };
    let xq = g.gather_rows(xv, &touched)?;
    let att = w.attn.forward(&mut g, store, xq, audio, &segments)?;
    let out = g.scatter_rows(xv, att, &touched)?;
    Ok(g.value(out).clone())
}

/// The fusion feed-forward network on every row of `z`.
pub fn ffn(z: &Tensor, w: &FusionWeights, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.leaf(z.clone());
    let out = w.ffn.forward(&mut g, store, zv)?;
    Ok(g.value(out).clone())
}

/// Gate evaluation on plain tensors: `(z_fused, per-row mean gate)`.
pub fn fusion_gate(
    x: &Tensor,
    z_ffn: &Tensor,
    p: &FusionGateParams,
    store: &ParamStore,
) -> Result<(Tensor, GateTrace)> {
    if x.shape() != z_ffn.shape() {
        return Err(Error::Shape {
            op: "fusion_gate",
            lhs: x.shape().to_vec(),
            rhs: z_ffn.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let zv = g.leaf(z_ffn.clone());
    let (f, gate) = p.apply(&mut g, store, xv, zv)?;
    let gt = g.value(gate);
    let trace = (0..gt.rows())
        .map(|r| gt.row(r).iter().sum::<f64>() / gt.cols() as f64)
        .collect();
    Ok((g.value(f).clone(), GateTrace(trace)))
}
