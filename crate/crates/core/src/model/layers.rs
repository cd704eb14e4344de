use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add_weight(format!("{name}.w"), fan_in, fan_out, rng);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b: Some(b) }
    }

    pub fn without_bias(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear { w: ps.add_weight(format!("{name}.w"), fan_in, fan_out, rng), b: None }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self.b {
            Some(b) => tape.linear(x, p[self.w], p[b]),
            None => tape.matmul(x, p[self.w]),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            g: ps.add(format!("{name}.g"), Tensor::full(&[d], 1.0)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.g], p[self.b], LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of one attention call plus each head's `[nq×nk]` weights.
pub(crate) struct AttentionOut {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            // a key bias shifts every score of a row equally, so softmax ignores it
            k: Linear::without_bias(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&Tensor>,
    ) -> Result<AttentionOut> {
        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, key)?;
        let v = self.v.forward(tape, p, value)?;
        let d = tape.shape(q)[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.narrow_last(q, h * dh, dh)?;
            let kh = tape.narrow_last(k, h * dh, dh)?;
            let vh = tape.narrow_last(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_masked(s, mask)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = tape.concat_last(&outs)?;
        Ok(AttentionOut { out: self.o.forward(tape, p, cat)?, weights })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            l1: Linear::new(ps, &format!("{name}.ffn1"), d, hidden, rng),
            l2: Linear::new(ps, &format!("{name}.ffn2"), hidden, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.l2.forward(tape, p, h)
    }
}

/// Post-norm self-attention block.
#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        EncoderLayer {
            attn: Attention::new(ps, &format!("{name}.attn"), d, heads, rng),
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d),
            ffn: FeedForward::new(ps, name, d, ffn, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d),
        }
    }

    /// `pos` is added to queries and keys, not to values.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, pos: Var) -> Result<Var> {
        let qk = tape.add(x, pos)?;
        let a = self.attn.forward(tape, p, qk, qk, x, None)?.out;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, x)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, p, x)
    }
}

/// Masked self-attention, cross-attention to the encoder memory, FFN.
#[derive(Clone, Debug)]
pub(crate) struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// What a decoder layer produced, with the self-attention internals kept
/// for inspection.
pub(crate) struct DecoderStep {
    pub out: Var,
    pub self_attn: Var,
    pub self_weights: Vec<Var>,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        DecoderLayer {
            self_attn: Attention::new(ps, &format!("{name}.self_attn"), d, heads, rng),
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d),
            cross_attn: Attention::new(ps, &format!("{name}.cross_attn"), d, heads, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(ps, name, d, ffn, rng),
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), d),
        }
    }

    /// `query_pos` joins the queries of both attentions; `memory_keys` is the
    /// memory with its position encoding already added.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        query_pos: Var,
        memory: Var,
        memory_keys: Var,
        mask: Option<&Tensor>,
    ) -> Result<DecoderStep> {
        let q = tape.add(x, query_pos)?;
        let sa = self.self_attn.forward(tape, p, q, q, x, mask)?;
        let y = tape.add(x, sa.out)?;
        let y = self.norm1.forward(tape, p, y)?;
        let q = tape.add(y, query_pos)?;
        let ca = self.cross_attn.forward(tape, p, q, memory_keys, memory, None)?.out;
        let y = tape.add(y, ca)?;
        let y = self.norm2.forward(tape, p, y)?;
        let f = self.ffn.forward(tape, p, y)?;
        let y = tape.add(y, f)?;
        Ok(DecoderStep { out: self.norm3.forward(tape, p, y)?, self_attn: sa.out, self_weights: sa.weights })
    }
}

/// Fixed 2-D sine encodings, `[h·w × d]` in row-major pixel order. The first
/// half of the channels encodes y, the second half x.
pub fn sine_position_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let scale = std::f64::consts::TAU;
    let mut out = vec![0.0; h * w * d];
    let enc = |pos: f64, row: &mut [f64]| {
        for (j, slot) in row.iter_mut().enumerate() {
            let freq = 10000f64.powf((2 * (j / 2)) as f64 / half as f64);
            let a = pos / freq;
            *slot = if j % 2 == 0 { a.sin() } else { a.cos() };
        }
    };
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            let (ry, rx) = row.split_at_mut(half);
            enc((y as f64 + 1.0) / h as f64 * scale, ry);
            enc((x as f64 + 1.0) / w as f64 * scale, rx);
        }
    }
    Tensor::from_parts(vec![h * w, d], out)
}
