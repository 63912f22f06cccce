//! Transformer building blocks: pre-LayerNorm encoder and decoder stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};

/// Sizes shared by every transformer stack in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl ModelDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Sinusoidal position table for positions `0..len`.
pub fn positional_encoding(len: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / d as f64);
            let angle = pos as f64 * freq;
            pe.set(pos, i, angle.sin());
            if i + 1 < d {
                pe.set(pos, i + 1, angle.cos());
            }
        }
    }
    pe
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.xavier(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.zeros(format!("{name}.bias"), 1, fan_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        tape.linear(x, self.weight, self.bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), 1, d),
            bias: store.zeros(format!("{name}.bias"), 1, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    n_heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut R) -> Self {
        let d = dims.d_model;
        Self {
            q: Linear::init(store, &format!("{name}.q"), d, d, rng),
            k: Linear::init(store, &format!("{name}.k"), d, d, rng),
            v: Linear::init(store, &format!("{name}.v"), d, d, rng),
            out: Linear::init(store, &format!("{name}.out"), d, d, rng),
            n_heads: dims.n_heads,
            head_dim: dims.head_dim(),
        }
    }

    /// Multi-head attention of `queries` over `keys_values`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: NodeId,
        keys_values: NodeId,
        causal: bool,
    ) -> NodeId {
        let q = self.q.forward(tape, queries);
        let k = self.k.forward(tape, keys_values);
        let v = self.v.forward(tape, keys_values);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let start = h * self.head_dim;
            let qh = tape.slice_cols(q, start, self.head_dim);
            let kh = tape.slice_cols(k, start, self.head_dim);
            let vh = tape.slice_cols(v, start, self.head_dim);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, causal);
            heads.push(tape.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        self.out.forward(tape, merged)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut R) -> Self {
        Self {
            up: Linear::init(store, &format!("{name}.up"), dims.d_model, dims.d_ff, rng),
            down: Linear::init(store, &format!("{name}.down"), dims.d_ff, dims.d_model, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let h = self.up.forward(tape, x);
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EncoderBlock {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderBlock {
    fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let h = self.ln_attn.forward(tape, x);
        let h = self.attn.forward(tape, h, h, false);
        let h = tape.dropout(h);
        let x = tape.add(x, h);
        let h = self.ln_ff.forward(tape, x);
        let h = self.ff.forward(tape, h);
        let h = tape.dropout(h);
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DecoderBlock {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    fn forward(&self, tape: &mut Tape, x: NodeId, memory: NodeId) -> NodeId {
        let h = self.ln_self.forward(tape, x);
        let h = self.self_attn.forward(tape, h, h, true);
        let h = tape.dropout(h);
        let x = tape.add(x, h);
        let h = self.ln_cross.forward(tape, x);
        let h = self.cross_attn.forward(tape, h, memory, false);
        let h = tape.dropout(h);
        let x = tape.add(x, h);
        let h = self.ln_ff.forward(tape, x);
        let h = self.ff.forward(tape, h);
        let h = tape.dropout(h);
        tape.add(x, h)
    }
}

/// Token embedding lookup plus sinusoidal positions starting at 0.
pub fn embed_tokens(tape: &mut Tape, table: ParamId, ids: &[usize]) -> NodeId {
    let d = tape.store().get(table).cols();
    let emb = tape.embed(table, ids);
    let pe = tape.input(positional_encoding(ids.len(), d));
    let x = tape.add(emb, pe);
    tape.dropout(x)
}

/// A stack of self-attention blocks followed by a final LayerNorm. The
/// embedding table is referenced, not owned, so it can be shared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderStack {
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
}

impl EncoderStack {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut R) -> Self {
        let blocks = (0..dims.n_layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                EncoderBlock {
                    ln_attn: LayerNorm::init(store, &format!("{p}.ln_attn"), dims.d_model),
                    attn: Attention::init(store, &format!("{p}.attn"), dims, rng),
                    ln_ff: LayerNorm::init(store, &format!("{p}.ln_ff"), dims.d_model),
                    ff: FeedForward::init(store, &format!("{p}.ff"), dims, rng),
                }
            })
            .collect();
        Self {
            blocks,
            final_ln: LayerNorm::init(store, &format!("{name}.final_ln"), dims.d_model),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h);
        }
        self.final_ln.forward(tape, h)
    }
}

/// Causal self-attention plus cross-attention blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderStack {
    blocks: Vec<DecoderBlock>,
    final_ln: LayerNorm,
}

impl DecoderStack {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut R) -> Self {
        let blocks = (0..dims.n_layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                DecoderBlock {
                    ln_self: LayerNorm::init(store, &format!("{p}.ln_self"), dims.d_model),
                    self_attn: Attention::init(store, &format!("{p}.self_attn"), dims, rng),
                    ln_cross: LayerNorm::init(store, &format!("{p}.ln_cross"), dims.d_model),
                    cross_attn: Attention::init(store, &format!("{p}.cross_attn"), dims, rng),
                    ln_ff: LayerNorm::init(store, &format!("{p}.ln_ff"), dims.d_model),
                    ff: FeedForward::init(store, &format!("{p}.ff"), dims, rng),
                }
            })
            .collect();
        Self {
            blocks,
            final_ln: LayerNorm::init(store, &format!("{name}.final_ln"), dims.d_model),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, memory: NodeId) -> NodeId {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, memory);
        }
        self.final_ln.forward(tape, h)
    }
}
