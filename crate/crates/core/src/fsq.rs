//! Finite scalar quantization and the speech tokenizer built on it.
//!
//! A latent `z ∈ ℝᵏ` is bounded per dimension as `h_j = ⌊L_j/2⌋·tanh(z_j)`
//! and rounded half away from zero, giving an integer code in
//! `[−⌊L_j/2⌋, ⌊L_j/2⌋]`. Codes map to ids by mixed radix with the first
//! dimension most significant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{kind, Checkpoint};
use crate::error::{Error, Result};
use crate::frontend::{argmax, argmax_hits};
use crate::nn::Linear;
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Rng, Tensor, Var};
use crate::train::{batch_gradients, chunks_of};

/// Largest codebook accepted; ids are stored as `usize` and embedded in
/// tables, so this is a practical rather than a representational bound.
pub const MAX_CODEBOOK: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsqConfig {
    pub levels: Vec<usize>,
}

impl Default for FsqConfig {
    fn default() -> Self {
        Self {
            levels: vec![5, 5, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FsqCode {
    pub code: Vec<i64>,
    pub id: usize,
}

impl FsqConfig {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        let cfg = Self { levels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("fsq.levels", "at least one level required"));
        }
        for (j, &l) in self.levels.iter().enumerate() {
            if l < 3 || l % 2 == 0 {
                return Err(Error::config(
                    format!("fsq.levels[{j}]"),
                    format!("level {l} must be odd and ≥ 3"),
                ));
            }
        }
        let size = self
            .levels
            .iter()
            .try_fold(1usize, |acc, &l| acc.checked_mul(l))
            .filter(|&s| s <= MAX_CODEBOOK);
        if size.is_none() {
            return Err(Error::config("fsq.levels", format!("codebook exceeds {MAX_CODEBOOK}")));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.levels.iter().product()
    }

    pub fn half(&self, j: usize) -> i64 {
        (self.levels[j] / 2) as i64
    }

    fn halves(&self) -> Vec<f64> {
        (0..self.levels.len()).map(|j| self.half(j) as f64).collect()
    }

    pub fn id_of(&self, code: &[i64]) -> Result<usize> {
        if code.len() != self.levels.len() {
            return Err(Error::Shape {
                op: "fsq_id",
                lhs: vec![code.len()],
                rhs: vec![self.levels.len()],
            });
        }
        let mut id = 0usize;
        for (j, (&c, &l)) in code.iter().zip(&self.levels).enumerate() {
            let h = self.half(j);
            if c.abs() > h {
                return Err(Error::invalid(format!("code {c} outside ±{h} in dimension {j}")));
            }
            id = id * l + (c + h) as usize;
        }
        Ok(id)
    }

    /// Exact mixed-radix decode; inverse of [`FsqConfig::id_of`].
    pub fn token_to_code(&self, id: usize) -> Result<Vec<i64>> {
        if id >= self.codebook_size() {
            return Err(Error::invalid(format!(
                "token {id} outside codebook of size {}",
                self.codebook_size()
            )));
        }
        let mut rest = id;
        let mut code = vec![0i64; self.levels.len()];
        for j in (0..self.levels.len()).rev() {
            code[j] = (rest % self.levels[j]) as i64 - self.half(j);
            rest /= self.levels[j];
        }
        Ok(code)
    }

    /// Per-dimension bounded value `⌊L_j/2⌋·tanh(z_j)`.
    pub fn bound(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.levels.len() {
            return Err(Error::Shape {
                op: "fsq_quantize",
                lhs: vec![z.len()],
                rhs: vec![self.levels.len()],
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "fsq_quantize" });
        }
        Ok(z.iter()
            .enumerate()
            .map(|(j, v)| self.half(j) as f64 * v.tanh())
            .collect())
    }

    pub fn quantize(&self, z: &[f64]) -> Result<FsqCode> {
        let code: Vec<i64> = self.bound(z)?.iter().map(|b| b.round() as i64).collect();
        let id = self.id_of(&code)?;
        Ok(FsqCode { code, id })
    }

    /// Latent whose bounded value sits exactly on the code:
    /// `atanh(code_j/⌊L_j/2⌋)`, clamped away from ±1.
    pub fn center_latent(&self, code: &[i64]) -> Vec<f64> {
        code.iter()
            .enumerate()
            .map(|(j, &c)| {
                let r = (c as f64 / self.half(j) as f64).clamp(-(1.0 - 1e-6), 1.0 - 1e-6);
                r.atanh()
            })
            .collect()
    }

    /// Quantizes every row of `z` on the graph. With `straight_through`
    /// the rounding passes gradients unchanged; without it rounding is
    /// skipped entirely (the identity-substitution reference).
    pub fn quantize_graph(&self, g: &mut Graph, z: Var, straight_through: bool) -> Result<Var> {
        if g.value(z).cols() != self.levels.len() {
            return Err(Error::Shape {
                op: "fsq_quantize",
                lhs: g.shape(z).to_vec(),
                rhs: vec![self.levels.len()],
            });
        }
        let t = g.tanh(z)?;
        let halves = g.input(Tensor::new(vec![self.levels.len()], self.halves())?);
        let bounded = g.mul(t, halves)?;
        if straight_through {
            g.round_ste(bounded)
        } else {
            Ok(bounded)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub fsq: FsqConfig,
    pub feat_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub frames_per_label: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            fsq: FsqConfig::default(),
            feat_dim: 16,
            hidden: 64,
            n_classes: 24,
            frames_per_label: 4,
            epochs: 4,
            batch_size: 16,
            lr: 3e-3,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.fsq.validate()?;
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("hidden", self.hidden),
            ("n_classes", self.n_classes),
            ("frames_per_label", self.frames_per_label),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("tokenizer.{name}"), "must be positive"));
            }
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("tokenizer.lr", "must be non-negative"));
        }
        Ok(())
    }
}

/// Tokenizer subsampling: kernel 3, stride 2, padding 1, so a `T`-frame
/// input yields `⌈T/2⌉` tokens.
pub const SUBSAMPLE: (usize, usize, usize) = (3, 2, 1);

pub fn token_count(frames: usize) -> usize {
    frames.div_ceil(2)
}

/// One labelled training example: `T×F` frames and one label per
/// `frames_per_label` frames.
pub type LabelledFrames = (Tensor, Vec<usize>);

#[derive(Debug, Clone)]
pub struct FsqTokenizer {
    pub config: TokenizerConfig,
    params: Option<ParamStore>,
    pub frame_accuracy: Option<f64>,
    enc_in: Linear,
    enc_out: Linear,
    head_in: Linear,
    head_out: Linear,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean per-frame loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean per-frame loss of the first and last batch of each epoch.
    pub batch_loss: Vec<(f64, f64)>,
    pub frame_accuracy: f64,
}

impl FsqTokenizer {
    pub fn new(config: TokenizerConfig) -> Result<Self> {
        config.validate()?;
        let (k, _, _) = SUBSAMPLE;
        let (f, h, d) = (config.feat_dim, config.hidden, config.fsq.latent_dim());
        Ok(Self {
            enc_in: Linear::new("tok.enc.0", k * f, h),
            enc_out: Linear::new("tok.enc.1", h, d),
            head_in: Linear::new("tok.head.0", d, h),
            head_out: Linear::new("tok.head.1", h, config.n_classes),
            config,
            params: None,
            frame_accuracy: None,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.params.is_some()
    }

    pub fn params(&self) -> Option<&ParamStore> {
        self.params.as_ref()
    }

    pub fn init_params(&self, rng: &mut Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for l in [&self.enc_in, &self.enc_out, &self.head_in, &self.head_out] {
            l.init(&mut store, rng);
        }
        store
    }

    /// Continuous latent `z` for every output frame.
    pub fn encode(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let (k, s, p) = SUBSAMPLE;
        let cols = g.unfold(frames, k, s, p)?;
        let h = self.enc_in.forward(g, cols)?;
        let h = g.silu(h)?;
        self.enc_out.forward(g, h)
    }

    fn logits(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let z = self.encode(g, frames)?;
        let q = self.config.fsq.quantize_graph(g, z, true)?;
        let h = self.head_in.forward(g, q)?;
        let h = g.silu(h)?;
        self.head_out.forward(g, h)
    }

    /// Label for tokenizer output frame `i`: the label under its center
    /// input frame `2i`.
    pub fn frame_targets(&self, n_out: usize, labels: &[usize]) -> Vec<Option<usize>> {
        (0..n_out)
            .map(|i| labels.get((2 * i / self.config.frames_per_label).min(labels.len().saturating_sub(1))).copied())
            .collect()
    }

    /// Trains encoder, quantizer and classification head with frame-level
    /// cross-entropy. With `lr = 0` the parameters come back unchanged.
    pub fn train(&mut self, data: &[LabelledFrames], rng: &mut Rng) -> Result<TrainLog> {
        if data.is_empty() {
            return Err(Error::invalid("train_tokenizer: empty corpus"));
        }
        for (i, (f, labels)) in data.iter().enumerate() {
            if f.cols() != self.config.feat_dim || labels.is_empty() {
                return Err(Error::invalid(format!("train_tokenizer: malformed example {i}")));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.n_classes) {
                return Err(Error::invalid(format!("train_tokenizer: label {bad} out of range")));
            }
        }
        let mut store = match self.params.take() {
            Some(p) => p,
            None => self.init_params(&mut rng.split_str("tokenizer-init")),
        };
        let trainable = store.select_prefixed(&["tok."]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: self.config.lr,
                ..Default::default()
            },
            &store,
            &trainable,
        )?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = TrainLog::default();
        for _ in 0..self.config.epochs {
            rng.shuffle(&mut order);
            let (mut loss_sum, mut hits, mut frames) = (0.0, 0.0, 0.0);
            let mut first_last = (f64::NAN, f64::NAN);
            for batch in chunks_of(&order, self.config.batch_size) {
                let items: Vec<&LabelledFrames> = batch.iter().map(|&i| &data[i]).collect();
                let n: f64 = items.iter().map(|(f, _)| token_count(f.rows()) as f64).sum();
                let (grads, stats) = batch_gradients(&store, &trainable, &items, |g, (f, labels)| {
                    let x = g.input(f.clone());
                    let logits = self.logits(g, x)?;
                    let targets = self.frame_targets(g.value(logits).rows(), labels);
                    let h = argmax_hits(g.value(logits), &targets);
                    let loss = g.cross_entropy(logits, &targets, 1.0 / n)?;
                    Ok((loss, vec![g.value(loss).item(), h]))
                })?;
                opt.step(&mut store, &grads)?;
                if first_last.0.is_nan() {
                    first_last.0 = stats[0];
                }
                first_last.1 = stats[0];
                loss_sum += stats[0] * n;
                hits += stats[1];
                frames += n;
            }
            log.epoch_loss.push(loss_sum / frames);
            log.batch_loss.push(first_last);
            log.frame_accuracy = hits / frames;
        }
        self.params = Some(store);
        let acc = self.accuracy(data)?;
        log.frame_accuracy = acc;
        self.frame_accuracy = Some(acc);
        Ok(log)
    }

    /// Frame classification accuracy of the current parameters.
    pub fn accuracy(&self, data: &[LabelledFrames]) -> Result<f64> {
        let store = self.trained_params()?;
        let (mut hits, mut total) = (0.0, 0.0);
        for (f, labels) in data {
            let mut g = Graph::with_params(store, None);
            let x = g.input(f.clone());
            let logits = self.logits(&mut g, x)?;
            let targets = self.frame_targets(g.value(logits).rows(), labels);
            hits += argmax_hits(g.value(logits), &targets);
            total += targets.len() as f64;
        }
        Ok(hits / total.max(1.0))
    }

    fn trained_params(&self) -> Result<&ParamStore> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::invalid("tokenizer has not been trained or loaded"))
    }

    /// Speech token ids, one per `⌈T/2⌉` output frame.
    pub fn tokenize(&self, frames: &Tensor) -> Result<Vec<usize>> {
        let store = self.trained_params()?;
        if frames.shape().len() != 2 || frames.cols() != self.config.feat_dim {
            return Err(Error::Shape {
                op: "tokenize",
                lhs: frames.shape().to_vec(),
                rhs: vec![self.config.feat_dim],
            });
        }
        let mut g = Graph::with_params(store, None);
        let x = g.input(frames.clone());
        let z = self.encode(&mut g, x)?;
        let z = g.value(z);
        (0..z.rows()).map(|r| Ok(self.config.fsq.quantize(z.row(r))?.id)).collect()
    }

    /// Most likely class per output frame (the ASR-style readout).
    pub fn classify(&self, frames: &Tensor) -> Result<Vec<usize>> {
        let store = self.trained_params()?;
        let mut g = Graph::with_params(store, None);
        let x = g.input(frames.clone());
        let logits = self.logits(&mut g, x)?;
        let l = g.value(logits);
        Ok((0..l.rows()).map(|r| argmax(l.row(r))).collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let store = self.trained_params()?;
        let mut ckpt = Checkpoint::new(kind::FSQ_TOKENIZER, store.clone());
        ckpt.config = serde_json::json!({
            "tokenizer": self.config,
            "frame_accuracy": self.frame_accuracy,
        });
        ckpt.trainable = store.names().cloned().collect();
        ckpt.save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::load(dir, Some(kind::FSQ_TOKENIZER))?;
        let config: TokenizerConfig = serde_json::from_value(ckpt.config["tokenizer"].clone())?;
        let mut tok = Self::new(config)?;
        tok.frame_accuracy = ckpt.config["frame_accuracy"].as_f64();
        tok.params = Some(ckpt.params);
        Ok(tok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(levels: &[usize]) -> FsqConfig {
        FsqConfig::new(levels.to_vec()).unwrap()
    }

    #[test]
    fn center_and_saturated_examples() {
        let c = cfg(&[3, 3]);
        assert_eq!(c.quantize(&[0.0, 0.0]).unwrap(), FsqCode { code: vec![0, 0], id: 4 });
        assert_eq!(c.quantize(&[10.0, -10.0]).unwrap(), FsqCode { code: vec![1, -1], id: 6 });
        assert_eq!(c.token_to_code(0).unwrap(), vec![-1, -1]);
        assert_eq!(c.token_to_code(8).unwrap(), vec![1, 1]);
        assert!(c.token_to_code(9).is_err());
    }

    #[test]
    fn rejects_bad_levels_and_inputs() {
        assert!(FsqConfig::new(vec![4]).is_err());
        assert!(FsqConfig::new(vec![1]).is_err());
        assert!(FsqConfig::new(vec![]).is_err());
        assert!(cfg(&[3]).quantize(&[f64::NAN]).is_err());
        assert!(cfg(&[3]).quantize(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let c = cfg(&[5]);
        for (b, code) in [(0.5, 1), (-0.5, -1), (1.5, 2), (-1.5, -2), (0.49, 0)] {
            // Bounded value is 2·tanh(z); pick z so that it lands near b.
            let z = (b / 2.0f64).atanh();
            let bounded = c.bound(&[z]).unwrap()[0];
            assert_eq!(bounded.round() as i64, c.quantize(&[z]).unwrap().code[0]);
            assert_eq!((b as f64).round() as i64, code);
        }
    }

    #[test]
    fn token_count_formula() {
        for t in 1..40 {
            let expect = (t + 2 - 3) / 2 + 1;
            assert_eq!(token_count(t), expect);
        }
    }

    fn toy_data(n: usize, seed: u64) -> Vec<LabelledFrames> {
        let mut rng = Rng::new(seed);
        let protos = rng.normal_tensor(&[3, 4], 1.0);
        (0..n)
            .map(|_| {
                let len = rng.range_inclusive(2, 4);
                let labels: Vec<usize> = (0..len).map(|_| rng.below(3)).collect();
                let mut data = Vec::new();
                for &l in &labels {
                    for _ in 0..4 {
                        data.extend(protos.row(l).iter().map(|v| v + 0.1 * rng.normal()));
                    }
                }
                (Tensor::new(vec![len * 4, 4], data).unwrap(), labels)
            })
            .collect()
    }

    fn toy_config() -> TokenizerConfig {
        TokenizerConfig {
            fsq: FsqConfig::new(vec![3, 3]).unwrap(),
            feat_dim: 4,
            hidden: 16,
            n_classes: 3,
            epochs: 6,
            batch_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn untrained_tokenizer_errors() {
        let tok = FsqTokenizer::new(toy_config()).unwrap();
        assert!(tok.tokenize(&Tensor::zeros(&[4, 4])).is_err());
        assert!(FsqTokenizer::new(toy_config()).unwrap().train(&[], &mut Rng::new(0)).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut tok = FsqTokenizer::new(TokenizerConfig {
            lr: 0.0,
            epochs: 1,
            ..toy_config()
        })
        .unwrap();
        let before = tok.init_params(&mut Rng::new(0).split_str("tokenizer-init"));
        tok.train(&toy_data(10, 1), &mut Rng::new(0)).unwrap();
        assert!(before.diff_names(tok.params().unwrap()).is_empty());
    }

    #[test]
    fn learns_toy_task_and_round_trips() {
        let data = toy_data(64, 2);
        let mut tok = FsqTokenizer::new(toy_config()).unwrap();
        let log = tok.train(&data, &mut Rng::new(3)).unwrap();
        assert!(log.frame_accuracy > 0.9, "{log:?}");
        assert!(log.epoch_loss.last() < log.epoch_loss.first());

        let tokens = tok.tokenize(&data[0].0).unwrap();
        assert_eq!(tokens.len(), token_count(data[0].0.rows()));
        assert!(tokens.iter().all(|&t| t < 9));
        assert_eq!(tokens, tok.tokenize(&data[0].0).unwrap());

        let dir = tempfile::tempdir().unwrap();
        tok.save(dir.path()).unwrap();
        let back = FsqTokenizer::load(dir.path()).unwrap();
        assert_eq!(back.tokenize(&data[0].0).unwrap(), tokens);
    }
}
