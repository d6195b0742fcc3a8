//! Chunked streaming speech decoder.
//!
//! Audio tokens are grouped into chunks of `C`. Each chunk becomes
//! `C·frames_per_token` mel frames by Euler-integrating a conditional
//! flow-matching velocity field from seeded Gaussian noise. A chunk is
//! conditioned only on its own tokens, the speaker prompt and the last `H`
//! frames already emitted (all zeros before the first chunk), and its noise
//! comes from `Rng::new(seed).split(chunk_index)`, so streaming and offline
//! decoding produce identical frames.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{kind, Checkpoint};
use crate::error::{Error, Result};
use crate::fsq::FsqConfig;
use crate::nn::{init_embedding, Linear};
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Rng, Tensor, Var};
use crate::train::{batch_gradients, chunks_of};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub chunk_size: usize,
    pub frames_per_token: usize,
    pub n_mels: usize,
    pub ode_steps: usize,
    pub lookback_frames: usize,
    /// Speaker prompt width.
    pub cond_dim: usize,
    pub token_dim: usize,
    pub hidden: usize,
    /// Number of token ids the decoder accepts.
    pub codebook_size: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            chunk_size: 10,
            frames_per_token: 2,
            n_mels: 8,
            ode_steps: 10,
            lookback_frames: 4,
            cond_dim: 8,
            token_dim: 16,
            hidden: 64,
            codebook_size: 125,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("chunk_size", self.chunk_size),
            ("frames_per_token", self.frames_per_token),
            ("n_mels", self.n_mels),
            ("ode_steps", self.ode_steps),
            ("cond_dim", self.cond_dim),
            ("token_dim", self.token_dim),
            ("hidden", self.hidden),
            ("codebook_size", self.codebook_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("flow.{name}"), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn frames_per_chunk(&self) -> usize {
        self.chunk_size * self.frames_per_token
    }
}

/// Splits tokens into consecutive chunks of `size`; only the last may be
/// shorter.
pub fn chunk_tokens(tokens: &[usize], size: usize) -> Result<Vec<Vec<usize>>> {
    if tokens.is_empty() {
        return Err(Error::invalid("chunk_tokens: empty token list"));
    }
    if size == 0 {
        return Err(Error::invalid("chunk_tokens: chunk size must be positive"));
    }
    Ok(tokens.chunks(size).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPrompt {
    pub id: usize,
    pub embedding: Vec<f64>,
}

impl SpeakerPrompt {
    /// Fixed prompt vector for speaker `id`, derived from `seed`.
    pub fn from_id(id: usize, dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).split_str("speaker-prompt").split(id as u64);
        Self {
            id,
            embedding: (0..dim).map(|_| rng.normal()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelChunk {
    pub chunk_index: usize,
    pub frames: Tensor,
}

/// Everything a chunk is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkCond {
    pub tokens: Vec<usize>,
    pub speaker: Vec<f64>,
    /// `H × n_mels` most recent frames before this chunk.
    pub lookback: Tensor,
}

/// Linear OT path: `x_t = (1 − t)·x0 + t·x1`.
pub fn ot_path(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    if x0.shape() != x1.shape() || t.len() != x0.rows() {
        return Err(Error::Shape {
            op: "ot_path",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    let cols = x0.cols();
    Ok(Tensor::from_fn(x0.shape(), |i| {
        let tt = t[i / cols];
        (1.0 - tt) * x0.data()[i] + tt * x1.data()[i]
    }))
}

/// Flow-matching regression loss `mean((v − (x1 − x0))²)` for a given
/// velocity node.
pub fn cfm_loss_from_velocity(g: &mut Graph, v: Var, x0: &Tensor, x1: &Tensor) -> Result<Var> {
    if g.shape(v) != x1.shape() || x0.shape() != x1.shape() {
        return Err(Error::Shape {
            op: "cfm_loss",
            lhs: g.shape(v).to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    let target = Tensor::new(
        x1.shape().to_vec(),
        x1.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect(),
    )?;
    let target = g.input(target);
    let d = g.sub(v, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq, None)
}

/// Euler integration `x_{k+1} = x_k + (1/N)·v(x_k, k/N)` from `x0`.
pub fn euler_integrate(
    x0: Tensor,
    steps: usize,
    mut velocity: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("ode_steps must be positive"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let v = velocity(&x, k as f64 * dt)?;
        if v.shape() != x.shape() {
            return Err(Error::Shape {
                op: "euler",
                lhs: v.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// The conditional velocity network: a per-frame MLP over
/// `[x_t, time features, token embedding, frame-position one-hot, speaker
/// prompt, flattened lookback]`.
#[derive(Debug, Clone)]
pub struct FlowDecoder {
    pub config: FlowConfig,
    layers: [Linear; 3],
}

pub const TIME_FEATURES: usize = 5;

fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    use std::f64::consts::PI;
    [t, (PI * t).sin(), (PI * t).cos(), (2.0 * PI * t).sin(), (2.0 * PI * t).cos()]
}

const TOKEN_TABLE: &str = "flow.token_embed";

impl FlowDecoder {
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d_in = c.n_mels + TIME_FEATURES + c.token_dim + c.frames_per_token + c.cond_dim + c.lookback_frames * c.n_mels;
        Ok(Self {
            layers: [
                Linear::new("flow.l0", d_in, c.hidden),
                Linear::new("flow.l1", c.hidden, c.hidden),
                Linear::new("flow.l2", c.hidden, c.n_mels),
            ],
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        init_embedding(store, TOKEN_TABLE, self.config.codebook_size, self.config.token_dim, 1.0, None, rng);
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    fn check_cond(&self, cond: &ChunkCond) -> Result<()> {
        let c = &self.config;
        if cond.tokens.is_empty() || cond.tokens.len() > c.chunk_size {
            return Err(Error::invalid(format!(
                "chunk must hold 1..={} tokens, got {}",
                c.chunk_size,
                cond.tokens.len()
            )));
        }
        if let Some(&bad) = cond.tokens.iter().find(|&&t| t >= c.codebook_size) {
            return Err(Error::invalid(format!("invalid speech token {bad}")));
        }
        if cond.speaker.len() != c.cond_dim || !cond.speaker.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("speaker prompt has the wrong width or non-finite values"));
        }
        if cond.lookback.shape() != [c.lookback_frames, c.n_mels] {
            return Err(Error::Shape {
                op: "flow_lookback",
                lhs: cond.lookback.shape().to_vec(),
                rhs: vec![c.lookback_frames, c.n_mels],
            });
        }
        Ok(())
    }

    /// Condition columns (everything except `x_t` and time) for each frame.
    fn cond_block(&self, g: &mut Graph, cond: &ChunkCond) -> Result<Var> {
        let c = &self.config;
        let frames = cond.tokens.len() * c.frames_per_token;
        let ids: Vec<usize> = cond
            .tokens
            .iter()
            .flat_map(|&t| std::iter::repeat(t).take(c.frames_per_token))
            .collect();
        let table = g.param(TOKEN_TABLE)?;
        let tok = g.embedding(table, &ids, None)?;
        let mut rest = Vec::with_capacity(frames * (c.frames_per_token + c.cond_dim + c.lookback_frames * c.n_mels));
        for f in 0..frames {
            rest.extend((0..c.frames_per_token).map(|j| f64::from(u8::from(j == f % c.frames_per_token))));
            rest.extend_from_slice(&cond.speaker);
            rest.extend_from_slice(cond.lookback.data());
        }
        let width = c.frames_per_token + c.cond_dim + c.lookback_frames * c.n_mels;
        let rest = g.input(Tensor::new(vec![frames, width], rest)?);
        g.concat_cols(&[tok, rest])
    }

    /// Velocity for every frame row of `x` (rows × n_mels) with per-row
    /// times `t`.
    pub fn velocity(&self, g: &mut Graph, x: Var, t: &[f64], cond: &ChunkCond) -> Result<Var> {
        self.check_cond(cond)?;
        let rows = g.value(x).rows();
        if rows != cond.tokens.len() * self.config.frames_per_token || t.len() != rows {
            return Err(Error::Shape {
                op: "flow_velocity",
                lhs: g.shape(x).to_vec(),
                rhs: vec![cond.tokens.len() * self.config.frames_per_token, t.len()],
            });
        }
        let tf: Vec<f64> = t.iter().flat_map(|&tt| time_features(tt)).collect();
        let tf = g.input(Tensor::new(vec![rows, TIME_FEATURES], tf)?);
        let cb = self.cond_block(g, cond)?;
        let h = g.concat_cols(&[x, tf, cb])?;
        let h = self.layers[0].forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.layers[1].forward(g, h)?;
        let h = g.silu(h)?;
        self.layers[2].forward(g, h)
    }

    /// Flow-matching loss on one chunk: `t ~ U(0,1)` per frame, `x0 ~ N(0, I)`.
    pub fn cfm_loss(&self, g: &mut Graph, x1: &Tensor, cond: &ChunkCond, rng: &mut Rng) -> Result<Var> {
        if x1.shape().len() != 2 || x1.cols() != self.config.n_mels {
            return Err(Error::Shape {
                op: "cfm_loss",
                lhs: x1.shape().to_vec(),
                rhs: vec![self.config.n_mels],
            });
        }
        let t: Vec<f64> = (0..x1.rows()).map(|_| rng.uniform()).collect();
        let x0 = rng.normal_tensor(x1.shape(), 1.0);
        let xt = ot_path(&x0, x1, &t)?;
        let xt = g.input(xt);
        let v = self.velocity(g, xt, &t, cond)?;
        cfm_loss_from_velocity(g, v, &x0, x1)
    }

    /// Samples one chunk by Euler integration from noise drawn from `rng`.
    pub fn cfm_sample(&self, store: &ParamStore, cond: &ChunkCond, rng: &mut Rng, steps: usize) -> Result<Tensor> {
        self.check_cond(cond)?;
        let rows = cond.tokens.len() * self.config.frames_per_token;
        let x0 = rng.normal_tensor(&[rows, self.config.n_mels], 1.0);
        euler_integrate(x0, steps, |x, t| {
            let mut g = Graph::with_params(store, None);
            let xv = g.input(x.clone());
            let v = self.velocity(&mut g, xv, &vec![t; rows], cond)?;
            Ok(g.value(v).clone())
        })
    }

    /// Decodes chunk `index` of an utterance. Shared by the streaming and
    /// offline paths.
    pub fn synth_chunk(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        speaker: &SpeakerPrompt,
        lookback: Tensor,
        seed: u64,
        index: usize,
    ) -> Result<MelChunk> {
        let cond = ChunkCond {
            tokens: tokens.to_vec(),
            speaker: speaker.embedding.clone(),
            lookback,
        };
        let mut rng = Rng::new(seed).split(index as u64);
        let frames = self.cfm_sample(store, &cond, &mut rng, self.config.ode_steps)?;
        Ok(MelChunk {
            chunk_index: index,
            frames,
        })
    }

    pub fn stream<'a>(&'a self, store: &'a ParamStore, speaker: SpeakerPrompt, seed: u64) -> StreamingSynthesizer<'a> {
        StreamingSynthesizer {
            flow: self,
            store,
            speaker,
            seed,
            pending: Vec::new(),
            history: Tensor::zeros(&[self.config.lookback_frames, self.config.n_mels]),
            next_index: 0,
        }
    }

    /// Whole-utterance decoding: chunk the tokens, decode each chunk in
    /// order, concatenate.
    pub fn decode_offline(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        speaker: &SpeakerPrompt,
        seed: u64,
    ) -> Result<Vec<MelChunk>> {
        let mut history = Tensor::zeros(&[self.config.lookback_frames, self.config.n_mels]);
        let mut out = Vec::new();
        for (i, chunk) in chunk_tokens(tokens, self.config.chunk_size)?.iter().enumerate() {
            let c = self.synth_chunk(store, chunk, speaker, history.clone(), seed, i)?;
            history = lookback_after(&history, &c.frames, self.config.lookback_frames)?;
            out.push(c);
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>, store: &ParamStore, renderer: &MelRenderer) -> Result<()> {
        let mut ckpt = Checkpoint::new(kind::FLOWDEC, store.clone());
        ckpt.config = serde_json::json!({ "flow": self.config, "renderer": renderer });
        ckpt.trainable = store.names().cloned().collect();
        ckpt.save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ParamStore, MelRenderer)> {
        let ckpt = Checkpoint::load(dir, Some(kind::FLOWDEC))?;
        let config: FlowConfig = serde_json::from_value(ckpt.config["flow"].clone())?;
        let renderer: MelRenderer = serde_json::from_value(ckpt.config["renderer"].clone())?;
        Ok((Self::new(config)?, ckpt.params, renderer))
    }
}

/// The last `h` rows of `[history; frames]`.
fn lookback_after(history: &Tensor, frames: &Tensor, h: usize) -> Result<Tensor> {
    let cols = history.cols().max(frames.cols());
    let mut rows: Vec<&[f64]> = (0..history.rows()).map(|r| history.row(r)).collect();
    rows.extend((0..frames.rows()).map(|r| frames.row(r)));
    let start = rows.len() - h.min(rows.len());
    let data: Vec<f64> = rows[start..].iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::new(vec![h.min(rows.len()), cols], data)
}

/// Incremental decoder: push tokens as they are produced, receive a chunk
/// every `C` tokens, flush the remainder with [`finish`](Self::finish).
pub struct StreamingSynthesizer<'a> {
    flow: &'a FlowDecoder,
    store: &'a ParamStore,
    speaker: SpeakerPrompt,
    seed: u64,
    pending: Vec<usize>,
    history: Tensor,
    next_index: usize,
}

impl StreamingSynthesizer<'_> {
    fn emit(&mut self) -> Result<MelChunk> {
        let tokens = std::mem::take(&mut self.pending);
        let chunk = self.flow.synth_chunk(
            self.store,
            &tokens,
            &self.speaker,
            self.history.clone(),
            self.seed,
            self.next_index,
        )?;
        self.history = lookback_after(&self.history, &chunk.frames, self.flow.config.lookback_frames)?;
        self.next_index += 1;
        Ok(chunk)
    }

    pub fn push(&mut self, token: usize) -> Result<Option<MelChunk>> {
        if token >= self.flow.config.codebook_size {
            return Err(Error::invalid(format!("invalid speech token {token}")));
        }
        self.pending.push(token);
        if self.pending.len() == self.flow.config.chunk_size {
            self.emit().map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn finish(mut self) -> Result<Option<MelChunk>> {
        if self.pending.is_empty() {
            Ok(None)
        } else {
            self.emit().map(Some)
        }
    }
}

/// Deterministic stand-in for a TTS front end: the mel frames of a token are
/// a fixed linear map of its FSQ code plus a per-frame-position offset and a
/// speaker offset. Used to make flow-decoder training targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelRenderer {
    pub fsq: FsqConfig,
    pub n_mels: usize,
    pub frames_per_token: usize,
    pub seed: u64,
}

impl MelRenderer {
    fn tables(&self) -> (Tensor, Tensor) {
        let mut rng = Rng::new(self.seed).split_str("mel-renderer");
        let k = self.fsq.latent_dim();
        let proj = rng.normal_tensor(&[self.n_mels, k], 0.5);
        let offsets = rng.normal_tensor(&[self.frames_per_token, self.n_mels], 0.3);
        (proj, offsets)
    }

    pub fn render(&self, tokens: &[usize], speaker: &SpeakerPrompt) -> Result<Tensor> {
        let (proj, offsets) = self.tables();
        let k = self.fsq.latent_dim();
        let spk: Vec<f64> = (0..self.n_mels)
            .map(|m| 0.2 * speaker.embedding.get(m % speaker.embedding.len().max(1)).copied().unwrap_or(0.0))
            .collect();
        let mut data = Vec::with_capacity(tokens.len() * self.frames_per_token * self.n_mels);
        for &t in tokens {
            let code = self.fsq.token_to_code(t)?;
            for f in 0..self.frames_per_token {
                for m in 0..self.n_mels {
                    let lin: f64 = (0..k).map(|j| proj.at(m, j) * code[j] as f64).sum();
                    data.push(lin + offsets.at(f, m) + spk[m]);
                }
            }
        }
        Tensor::new(vec![tokens.len() * self.frames_per_token, self.n_mels], data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_utterances: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            lr: 2e-3,
            max_utterances: 1000,
        }
    }
}

/// One flow-training example: a chunk's target frames and its condition.
pub type FlowExample = (Tensor, ChunkCond);

/// Splits a rendered utterance into per-chunk training examples with
/// teacher-forced (ground-truth) lookback.
pub fn chunk_examples(config: &FlowConfig, tokens: &[usize], mel: &Tensor, speaker: &SpeakerPrompt) -> Result<Vec<FlowExample>> {
    let mut history = Tensor::zeros(&[config.lookback_frames, config.n_mels]);
    let mut out = Vec::new();
    let mut start = 0;
    for chunk in chunk_tokens(tokens, config.chunk_size)? {
        let rows = chunk.len() * config.frames_per_token;
        let data = mel.data()[start * config.n_mels..(start + rows) * config.n_mels].to_vec();
        let frames = Tensor::new(vec![rows, config.n_mels], data)?;
        out.push((
            frames.clone(),
            ChunkCond {
                tokens: chunk,
                speaker: speaker.embedding.clone(),
                lookback: history.clone(),
            },
        ));
        history = lookback_after(&history, &frames, config.lookback_frames)?;
        start += rows;
    }
    Ok(out)
}

/// Trains the velocity network with the flow-matching loss. Returns the
/// mean loss of each epoch.
pub fn train_flow(
    flow: &FlowDecoder,
    store: &mut ParamStore,
    examples: &[FlowExample],
    cfg: &FlowTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid("train_flow: no examples"));
    }
    let trainable = store.select_prefixed(&["flow."]);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        store,
        &trainable,
    )?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut sum, mut n) = (0.0, 0.0);
        for batch in chunks_of(&order, cfg.batch_size) {
            step += 1;
            let items: Vec<(usize, &FlowExample)> = batch.iter().map(|&i| (i, &examples[i])).collect();
            let scale = 1.0 / items.len() as f64;
            let noise = rng.split(step);
            let (grads, stats) = batch_gradients(store, &trainable, &items, |g, (i, (x1, cond))| {
                let mut r = noise.split(*i as u64);
                let l = flow.cfm_loss(g, x1, cond, &mut r)?;
                let value = g.value(l).item();
                Ok((g.scale(l, scale)?, vec![value]))
            })?;
            opt.step(store, &grads)?;
            sum += stats[0];
            n += items.len() as f64;
        }
        losses.push(sum / n);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocoderConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub window: usize,
    /// Frequency of mel bin 0; bin `b` sits at `base_hz · 2^(b/2)`.
    pub base_hz: f64,
    pub amp_scale: f64,
    /// Mel values at or below this floor are silent.
    pub floor: f64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            hop: 160,
            window: 320,
            base_hz: 200.0,
            amp_scale: 1.0,
            floor: -10.0,
        }
    }
}

impl VocoderConfig {
    pub fn bin_hz(&self, b: usize) -> f64 {
        self.base_hz * 2f64.powf(b as f64 / 2.0)
    }

    pub fn output_len(&self, frames: usize) -> usize {
        self.hop * (frames - 1) + self.window
    }
}

/// Sinusoidal overlap-add synthesis. Frame `i` contributes a periodic-Hann
/// windowed sum of sinusoids (one per mel bin at [`VocoderConfig::bin_hz`],
/// amplitude `exp(amp_scale·m)` or 0 at the floor) starting at sample
/// `i·hop`; phases follow the global sample index. The result is
/// peak-normalized to 0.99.
pub fn pseudo_vocoder(mel: &Tensor, cfg: &VocoderConfig) -> Result<Vec<f64>> {
    if mel.shape().len() != 2 || mel.rows() == 0 {
        return Err(Error::invalid("pseudo_vocoder: empty mel"));
    }
    if !mel.is_finite() {
        return Err(Error::NonFinite { op: "pseudo_vocoder" });
    }
    if cfg.hop == 0 || cfg.window == 0 || cfg.sample_rate == 0 {
        return Err(Error::invalid("pseudo_vocoder: hop, window and sample rate must be positive"));
    }
    use std::f64::consts::PI;
    let n_bins = mel.cols();
    let sr = f64::from(cfg.sample_rate);
    let mut out = vec![0.0; cfg.output_len(mel.rows())];
    let window: Vec<f64> = (0..cfg.window)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / cfg.window as f64).cos())
        .collect();
    for i in 0..mel.rows() {
        let amps: Vec<f64> = mel
            .row(i)
            .iter()
            .map(|&m| if m <= cfg.floor { 0.0 } else { (cfg.amp_scale * m).exp() })
            .collect();
        if amps.iter().all(|&a| a == 0.0) {
            continue;
        }
        let start = i * cfg.hop;
        for (n, w) in window.iter().enumerate() {
            let s = (start + n) as f64;
            let v: f64 = (0..n_bins)
                .filter(|&b| amps[b] != 0.0)
                .map(|b| amps[b] * (2.0 * PI * cfg.bin_hz(b) * s / sr).sin())
                .sum();
            out[start + n] += w * v;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.99 / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * f64::from(i16::MAX)).round() as i16)
            .map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}

/// Stores mel frames as a `mel` container with one array named `mel`.
pub fn save_mel(dir: impl AsRef<Path>, mel: &Tensor) -> Result<()> {
    let mut store = ParamStore::new();
    store.insert("mel", mel.clone());
    Checkpoint::new(kind::MEL, store).save(dir)
}

pub fn concat_chunks(chunks: &[MelChunk]) -> Result<Tensor> {
    let cols = chunks.first().map_or(0, |c| c.frames.cols());
    let data: Vec<f64> = chunks.iter().flat_map(|c| c.frames.data().iter().copied()).collect();
    let rows = data.len() / cols.max(1);
    Tensor::new(vec![rows, cols], data)
}
