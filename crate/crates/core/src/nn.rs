//! Layer building blocks. Layers are lightweight descriptors (names and
//! dimensions); their weights live in a [`ParamStore`] and are pulled onto a
//! [`Graph`] at forward time.

use std::rc::Rc;

use crate::duolm::lora::LoraSpec;
use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};

/// Fill value for masked attention scores; `exp` of it underflows to exactly 0.
pub const MASKED_SCORE: f64 = -1e30;

/// Affine map `y = x·Wᵀ + b` with `W: d_out×d_in`, optionally carrying a
/// low-rank adapter.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraSpec>,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            lora: None,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let std = 1.0 / (self.d_in as f64).sqrt();
        store.insert(self.weight_name(), rng.normal_tensor(&[self.d_out, self.d_in], std));
        store.insert(self.bias_name(), Tensor::zeros(&[self.d_out]));
    }

    /// Zeroes the weight and bias; a residual branch ending in this layer
    /// starts as an exact no-op.
    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(self.weight_name(), Tensor::zeros(&[self.d_out, self.d_in]));
        store.insert(self.bias_name(), Tensor::zeros(&[self.d_out]));
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = g.param(&self.bias_name())?;
        let mut y = g.matmul_nt(x, w)?;
        if let Some(spec) = &self.lora {
            let delta = spec.delta(g, &self.name, x)?;
            y = g.add(y, delta)?;
        }
        g.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.name), Tensor::full(&[self.dim], 1.0));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.dim]));
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&format!("{}.gamma", self.name))?;
        let beta = g.param(&format!("{}.beta", self.name))?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Row-major `len×len` mask, true where key position > query position.
pub fn causal_mask(len: usize) -> Rc<Vec<bool>> {
    Rc::new((0..len * len).map(|i| i % len > i / len).collect())
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim),
            v: Linear::new(format!("{name}.v"), dim, dim),
            o: Linear::new(format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng, zero_out: bool) {
        self.q.init(store, rng);
        self.k.init(store, rng);
        self.v.init(store, rng);
        if zero_out {
            self.o.init_zero(store);
        } else {
            self.o.init(store, rng);
        }
    }

    /// `mask` marks (query, key) pairs that may not attend; `None` means
    /// full bidirectional attention.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Rc<Vec<bool>>>) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.masked_fill(scores, m.clone(), MASKED_SCORE)?;
            }
            let attn = g.softmax(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, cat)
    }
}

/// Two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(format!("{name}.up"), dim, hidden),
            down: Linear::new(format!("{name}.down"), hidden, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng, zero_out: bool) {
        self.up.init(store, rng);
        if zero_out {
            self.down.init_zero(store);
        } else {
            self.down.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.silu(h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer decoder layer with causal self-attention.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(name: &str, dim: usize, heads: usize, ff_dim: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads),
            ln_ff: LayerNorm::new(format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(&format!("{name}.ff"), dim, ff_dim),
        }
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = self.attn.linears_mut().into_iter().collect();
        out.push(&mut self.ff.up);
        out.push(&mut self.ff.down);
        out
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.ln_attn.init(store);
        self.attn.init(store, rng, false);
        self.ln_ff.init(store);
        self.ff.init(store, rng, false);
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &Rc<Vec<bool>>) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let h = self.attn.forward(g, h, Some(mask))?;
        let x = g.add(x, h)?;
        let h = self.ln_ff.forward(g, x)?;
        let h = self.ff.forward(g, h)?;
        g.add(x, h)
    }
}

/// Embedding table initialized with `N(0, std²)` entries; `zero_row`, when
/// given, is set to exactly zero.
pub fn init_embedding(
    store: &mut ParamStore,
    name: &str,
    vocab: usize,
    dim: usize,
    std: f64,
    zero_row: Option<usize>,
    rng: &mut Rng,
) {
    let mut t = rng.normal_tensor(&[vocab, dim], std);
    if let Some(r) = zero_row {
        t.data_mut()[r * dim..(r + 1) * dim].fill(0.0);
    }
    store.insert(name, t);
}
