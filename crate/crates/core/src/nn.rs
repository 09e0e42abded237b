//! Layers built on [`Graph`]: linear maps, layer norm, multi-head attention and
//! post-norm transformer blocks.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::params::{glorot, Group, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), glorot(rng, d_in, d_out), group);
        let bias = store.add(&format!("{name}.bias"), Mat::zeros((1, d_out)), group);
        Self {
            weight,
            bias: Some(bias),
            d_in,
            d_out,
        }
    }

    pub fn no_bias<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), glorot(rng, d_in, d_out), group);
        Self {
            weight,
            bias: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Zeroes weight and bias so the layer outputs exactly zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).fill(0.0);
        if let Some(b) = self.bias {
            store.value_mut(b).fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Mat::ones((1, dim)), group),
            beta: store.add(&format!("{name}.beta"), Mat::zeros((1, dim)), group),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.normalize_rows(x, 1e-5);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.0"), group, d_in, d_hidden),
            out: Linear::new(store, rng, &format!("{name}.1"), group, d_hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), group, dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), group, dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), group, dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), group, dim, dim),
            heads,
            dim,
        }
    }

    /// Rows of `query` attend over rows of `memory`.
    pub fn forward(&self, g: &mut Graph, query: Var, memory: Var) -> Var {
        self.forward_kv(g, query, memory, memory)
    }

    /// Attention with separate key and value inputs (same row count).
    pub fn forward_kv(&self, g: &mut Graph, query: Var, keys: Var, values: Var) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, keys);
        let v = self.v.forward(g, values);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), g.slice_cols(v, lo, hi))
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.o.forward(g, merged)
    }
}

/// Post-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), group, dim, heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, dim),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), group, dim, 2 * dim, dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.forward_pos(g, x, None)
    }

    /// Positions, when given, are added to queries and keys only.
    pub fn forward_pos(&self, g: &mut Graph, x: Var, pos: Option<Var>) -> Var {
        let qk = match pos {
            Some(p) => g.add(x, p),
            None => x,
        };
        let a = self.attn.forward_kv(g, qk, qk, x);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }
}

/// Post-norm decoder block: self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), group, dim, heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, dim),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), group, dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, dim),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), group, dim, 2 * dim, dim),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), group, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, tgt: Var, memory: Var) -> Var {
        self.forward_keyed(g, tgt, memory, memory)
    }

    /// Like [`DecoderLayer::forward`], with cross-attention keys taken from
    /// `keys` (e.g. memory plus positions) and values from `memory`.
    pub fn forward_keyed(&self, g: &mut Graph, tgt: Var, keys: Var, memory: Var) -> Var {
        let a = self.self_attn.forward(g, tgt, tgt);
        let x = g.add(tgt, a);
        let x = self.norm1.forward(g, x);
        let c = self.cross_attn.forward_kv(g, x, keys, memory);
        let x = g.add(x, c);
        let x = self.norm2.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.norm3.forward(g, x)
    }

    /// Cross-attention and feed-forward only, for callers that have no use
    /// for query-to-query mixing.
    pub fn forward_cross(&self, g: &mut Graph, tgt: Var, memory: Var) -> Var {
        let c = self.cross_attn.forward(g, tgt, memory);
        let x = g.add(tgt, c);
        let x = self.norm2.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.norm3.forward(g, x)
    }
}

/// Fixed 2-D sinusoidal position table, `rows·cols × dim`, row-major over the grid.
pub fn sine_position_table(rows: usize, cols: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let mut pe = Mat::zeros((rows * cols, dim));
    for r in 0..rows {
        for c in 0..cols {
            let t = r * cols + c;
            for (offset, coord) in [(0usize, r as f32), (half, c as f32)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 100f32.powf(2.0 * i as f32 / half as f32);
                    pe[[t, offset + 2 * i]] = (coord * freq).sin();
                    pe[[t, offset + 2 * i + 1]] = (coord * freq).cos();
                }
            }
        }
    }
    pe
}
