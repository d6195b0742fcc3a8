//! Speech frontend: strided convolutions over time, Conformer-style encoder
//! blocks, and a two-layer MLP adapter into the language model's embedding
//! width.
//!
//! Output length of one conv layer is
//! `T_out = ⌊(T_in + 2·padding − kernel) / stride⌋ + 1`, applied layer by
//! layer; it depends only on `T` and the layer chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Rng, Tensor, TrainableSet, Var};
use crate::train::{batch_gradients, chunks_of};

pub const PREFIX: &str = "frontend.";

/// A `T×F` feature matrix plus its frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSeq {
    pub frames: Tensor,
    pub frame_rate_hz: f64,
}

impl AudioFeatureSeq {
    pub fn new(frames: Tensor, frame_rate_hz: f64, feat_dim: usize) -> Result<Self> {
        if frames.shape().len() != 2 || frames.cols() != feat_dim {
            return Err(Error::Shape {
                op: "audio_features",
                lhs: frames.shape().to_vec(),
                rhs: vec![feat_dim],
            });
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite { op: "audio_features" });
        }
        if frame_rate_hz <= 0.0 {
            return Err(Error::invalid("frame rate must be positive"));
        }
        Ok(Self {
            frames,
            frame_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn output_len(&self, t_in: usize) -> Option<usize> {
        (t_in + 2 * self.padding >= self.kernel)
            .then(|| (t_in + 2 * self.padding - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub feat_dim: usize,
    pub conv: Vec<ConvLayer>,
    pub encoder_blocks: usize,
    pub enc_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub adapter_hidden: usize,
    pub lm_dim: usize,
    pub max_positions: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            conv: vec![
                ConvLayer {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                };
                2
            ],
            encoder_blocks: 2,
            enc_dim: 64,
            heads: 4,
            ff_dim: 128,
            conv_kernel: 3,
            adapter_hidden: 64,
            lm_dim: 64,
            max_positions: 128,
        }
    }
}

impl FrontendConfig {
    /// Dimensions of the full-size encoder, kept for reference.
    pub fn full_scale() -> Self {
        Self {
            feat_dim: 80,
            conv: vec![
                ConvLayer {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                };
                3
            ],
            encoder_blocks: 24,
            enc_dim: 1024,
            heads: 16,
            ff_dim: 1536,
            conv_kernel: 3,
            adapter_hidden: 3072,
            lm_dim: 3072,
            max_positions: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv.is_empty() {
            return Err(Error::config("frontend.conv", "at least one conv layer required"));
        }
        for (i, c) in self.conv.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 {
                return Err(Error::config(
                    format!("frontend.conv[{i}]"),
                    "kernel and stride must be ≥ 1",
                ));
            }
        }
        if self.heads == 0 || self.enc_dim % self.heads != 0 {
            return Err(Error::config("frontend.heads", "enc_dim must be divisible by heads"));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::config("frontend.conv_kernel", "must be odd"));
        }
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("enc_dim", self.enc_dim),
            ("ff_dim", self.ff_dim),
            ("adapter_hidden", self.adapter_hidden),
            ("lm_dim", self.lm_dim),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::config(format!("frontend.{name}"), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn downsampling_factor(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product()
    }

    /// Length after the conv chain, or `None` if `t` is too short.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        self.conv.iter().try_fold(t, |len, c| c.output_len(len))
    }

    /// Shortest input that yields at least one output frame.
    pub fn min_input_len(&self) -> usize {
        self.conv.iter().rev().fold(1usize, |need, c| {
            ((need - 1) * c.stride + c.kernel).saturating_sub(2 * c.padding).max(1)
        })
    }

    /// Input frame at the center of output frame `i`'s receptive field.
    pub fn center_frame(&self, i: usize) -> isize {
        self.conv.iter().rev().fold(i as isize, |c, l| {
            c * l.stride as isize + (l.kernel as isize - 1) / 2 - l.padding as isize
        })
    }
}

/// Conformer block: ½·FFN → self-attention → depthwise-conv module → ½·FFN,
/// each residual behind a layer norm, then a closing layer norm.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    ln_ff1: LayerNorm,
    ff1: FeedForward,
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_conv: LayerNorm,
    conv_in: Linear,
    conv_dw: String,
    conv_norm: LayerNorm,
    conv_out: Linear,
    ln_ff2: LayerNorm,
    ff2: FeedForward,
    ln_out: LayerNorm,
    conv_kernel: usize,
    dim: usize,
}

impl ConformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, ff_dim: usize, conv_kernel: usize) -> Self {
        Self {
            ln_ff1: LayerNorm::new(format!("{name}.ln_ff1"), dim),
            ff1: FeedForward::new(&format!("{name}.ff1"), dim, ff_dim),
            ln_attn: LayerNorm::new(format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads),
            ln_conv: LayerNorm::new(format!("{name}.ln_conv"), dim),
            conv_in: Linear::new(format!("{name}.conv_in"), dim, dim),
            conv_dw: format!("{name}.conv_dw"),
            conv_norm: LayerNorm::new(format!("{name}.conv_norm"), dim),
            conv_out: Linear::new(format!("{name}.conv_out"), dim, dim),
            ln_ff2: LayerNorm::new(format!("{name}.ln_ff2"), dim),
            ff2: FeedForward::new(&format!("{name}.ff2"), dim, ff_dim),
            ln_out: LayerNorm::new(format!("{name}.ln_out"), dim),
            conv_kernel,
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng, zero_outputs: bool) {
        for ln in [
            &self.ln_ff1,
            &self.ln_attn,
            &self.ln_conv,
            &self.conv_norm,
            &self.ln_ff2,
            &self.ln_out,
        ] {
            ln.init(store);
        }
        self.ff1.init(store, rng, zero_outputs);
        self.attn.init(store, rng, zero_outputs);
        self.conv_in.init(store, rng);
        let std = 1.0 / (self.conv_kernel as f64).sqrt();
        store.insert(self.conv_dw.clone(), rng.normal_tensor(&[self.conv_kernel, self.dim], std));
        if zero_outputs {
            self.conv_out.init_zero(store);
        } else {
            self.conv_out.init(store, rng);
        }
        self.ff2.init(store, rng, zero_outputs);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln_ff1.forward(g, x)?;
        let h = self.ff1.forward(g, h)?;
        let h = g.scale(h, 0.5)?;
        let x = g.add(x, h)?;

        let h = self.ln_attn.forward(g, x)?;
        let h = self.attn.forward(g, h, None)?;
        let x = g.add(x, h)?;

        let h = self.ln_conv.forward(g, x)?;
        let h = self.conv_in.forward(g, h)?;
        let h = g.silu(h)?;
        let w = g.param(&self.conv_dw)?;
        let h = g.depthwise_conv(h, w)?;
        let h = self.conv_norm.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.conv_out.forward(g, h)?;
        let x = g.add(x, h)?;

        let h = self.ln_ff2.forward(g, x)?;
        let h = self.ff2.forward(g, h)?;
        let h = g.scale(h, 0.5)?;
        let x = g.add(x, h)?;
        self.ln_out.forward(g, x)
    }
}

#[derive(Debug, Clone)]
pub struct Frontend {
    pub config: FrontendConfig,
    conv: Vec<Linear>,
    pos: String,
    blocks: Vec<ConformerBlock>,
    adapter_in: Linear,
    adapter_out: Linear,
}

impl Frontend {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        config.validate()?;
        let mut conv = Vec::new();
        let mut c_in = config.feat_dim;
        for (i, layer) in config.conv.iter().enumerate() {
            conv.push(Linear::new(
                format!("{PREFIX}conv.{i}"),
                layer.kernel * c_in,
                config.enc_dim,
            ));
            c_in = config.enc_dim;
        }
        let blocks = (0..config.encoder_blocks)
            .map(|i| {
                ConformerBlock::new(
                    &format!("{PREFIX}block.{i}"),
                    config.enc_dim,
                    config.heads,
                    config.ff_dim,
                    config.conv_kernel,
                )
            })
            .collect();
        Ok(Self {
            adapter_in: Linear::new(format!("{PREFIX}adapter.0"), config.enc_dim, config.adapter_hidden),
            adapter_out: Linear::new(format!("{PREFIX}adapter.1"), config.adapter_hidden, config.lm_dim),
            pos: format!("{PREFIX}pos"),
            conv,
            blocks,
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.init_with(store, rng, false);
    }

    /// With `zero_outputs`, every residual branch of the encoder ends in a
    /// zero projection, so `encode` reduces to the closing layer norms.
    pub fn init_with(&self, store: &mut ParamStore, rng: &mut Rng, zero_outputs: bool) {
        for c in &self.conv {
            c.init(store, rng);
        }
        init_embedding(store, &self.pos, self.config.max_positions, self.config.enc_dim, 0.1, None, rng);
        for b in &self.blocks {
            b.init(store, rng, zero_outputs);
        }
        self.adapter_in.init(store, rng);
        self.adapter_out.init(store, rng);
    }

    pub fn output_len(&self, t: usize) -> Result<usize> {
        self.config.output_len(t).ok_or_else(|| {
            Error::invalid(format!(
                "feature sequence of {t} frames is too short; at least {} frames required",
                self.config.min_input_len()
            ))
        })
    }

    /// Strided convolutions (each followed by SiLU) plus learned absolute
    /// position embeddings. `T×F` → `T′×enc_dim`.
    pub fn conv_subsample(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (t, f) = (g.value(x).rows(), g.value(x).cols());
        if f != self.config.feat_dim {
            return Err(Error::Shape {
                op: "conv_subsample",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.config.feat_dim],
            });
        }
        let t_out = self.output_len(t)?;
        if t_out > self.config.max_positions {
            return Err(Error::invalid(format!(
                "{t_out} encoder frames exceed max_positions {}",
                self.config.max_positions
            )));
        }
        let mut h = x;
        for (layer, lin) in self.config.conv.iter().zip(&self.conv) {
            let cols = g.unfold(h, layer.kernel, layer.stride, layer.padding)?;
            let y = lin.forward(g, cols)?;
            h = g.silu(y)?;
        }
        let pos = g.param(&self.pos)?;
        let pos = g.slice_rows(pos, 0, t_out)?;
        g.add(h, pos)
    }

    pub fn encode(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.blocks.iter().try_fold(h, |h, b| b.forward(g, h))
    }

    pub fn adapt(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.adapt_with(g, h, true)
    }

    /// `nonlinear = false` skips the SiLU between the two adapter layers.
    #[doc(hidden)]
    pub fn adapt_with(&self, g: &mut Graph, h: Var, nonlinear: bool) -> Result<Var> {
        let mut y = self.adapter_in.forward(g, h)?;
        if nonlinear {
            y = g.silu(y)?;
        }
        self.adapter_out.forward(g, y)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv_subsample(g, x)?;
        let h = self.encode(g, h)?;
        self.adapt(g, h)
    }

    /// Inference-only forward producing a plain tensor.
    pub fn embed(&self, store: &ParamStore, seq: &AudioFeatureSeq) -> Result<Tensor> {
        let mut g = Graph::with_params(store, None);
        let x = g.input(seq.frames.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn param_names(store: &ParamStore) -> TrainableSet {
        store.select_prefixed(&[PREFIX])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_utterances: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            lr: 2e-3,
            max_utterances: 800,
        }
    }
}

const CLS_HEAD: &str = "frontend_cls";

/// Short frame-classification pretraining: each encoder frame predicts the
/// source token under the center of its receptive field. The temporary
/// classifier head is discarded afterwards. Returns final-epoch frame
/// accuracy.
pub fn warmup(
    frontend: &Frontend,
    store: &mut ParamStore,
    data: &[(Tensor, Vec<usize>)],
    frames_per_token: usize,
    n_classes: usize,
    cfg: &WarmupConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("frontend warm-up: empty corpus"));
    }
    let head = Linear::new(CLS_HEAD, frontend.config.lm_dim, n_classes);
    head.init(store, rng);
    let trainable = store.select_prefixed(&[PREFIX, CLS_HEAD]);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        store,
        &trainable,
    )?;
    let n = data.len().min(cfg.max_utterances);
    let mut order: Vec<usize> = (0..n).collect();
    let mut accuracy = 0.0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut correct, mut total) = (0.0, 0.0);
        for batch in chunks_of(&order, cfg.batch_size) {
            let items: Vec<&(Tensor, Vec<usize>)> = batch.iter().map(|&i| &data[i]).collect();
            let frames: f64 = items
                .iter()
                .map(|(f, _)| frontend.config.output_len(f.rows()).unwrap_or(0) as f64)
                .sum();
            let (grads, stats) = batch_gradients(store, &trainable, &items, |g, (feats, labels)| {
                let x = g.input(feats.clone());
                let h = frontend.forward(g, x)?;
                let logits = head.forward(g, h)?;
                let t_out = g.value(logits).rows();
                let targets: Vec<Option<usize>> = (0..t_out)
                    .map(|i| {
                        let c = frontend.config.center_frame(i).max(0) as usize / frames_per_token;
                        labels.get(c.min(labels.len() - 1)).copied()
                    })
                    .collect();
                let hits = argmax_hits(g.value(logits), &targets);
                let loss = g.cross_entropy(logits, &targets, 1.0 / frames)?;
                Ok((loss, vec![hits, t_out as f64]))
            })?;
            opt.step(store, &grads)?;
            correct += stats[0];
            total += stats[1];
        }
        accuracy = correct / total.max(1.0);
    }
    for suffix in ["weight", "bias"] {
        store.remove(&format!("{CLS_HEAD}.{suffix}"));
    }
    Ok(accuracy)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmax_hits(logits: &Tensor, targets: &[Option<usize>]) -> f64 {
    targets
        .iter()
        .enumerate()
        .filter(|(r, t)| t.is_some_and(|t| argmax(logits.row(*r)) == t))
        .count() as f64
}
