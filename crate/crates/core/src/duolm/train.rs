//! Teacher-forced training for both stages.

use serde::{Deserialize, Serialize};

use super::model::{DuoLm, Stage};
use super::sequence::{build_joint_sequence, JointSequence};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, ParamStore, Rng, Tensor, TrainableSet};
use crate::train::{batch_gradients, chunks_of};

/// One training example: frozen speech-prefix rows (frontend output) and
/// the two target streams without their EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prefix: Tensor,
    pub text: Vec<usize>,
    pub audio: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_final_ratio: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
            lr_final_ratio: 0.1,
            weight_decay: 0.0,
            grad_clip: 1.0,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{field}.batch_size"), "must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::config(format!("{field}.lr"), "lr, weight_decay and grad_clip must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.lr_final_ratio) {
            return Err(Error::config(format!("{field}.lr_final_ratio"), "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub text_loss: f64,
    pub audio_loss: f64,
    pub total: f64,
}

impl DuoLm {
    /// Target sequence for an example under this model's stage.
    pub fn joint_sequence(&self, ex: &Example) -> Result<JointSequence> {
        let (tv, av) = (self.text_vocab(), self.audio_vocab());
        let text: Vec<usize> = ex.text.iter().copied().chain([tv.eos()]).collect();
        match self.stage {
            Stage::Duo => {
                let audio: Vec<usize> = ex.audio.iter().copied().chain([av.eos()]).collect();
                build_joint_sequence(&text, &audio, self.config.delay, tv, av)
            }
            Stage::TextOnly => {
                if let Some(bad) = ex.text.iter().find(|&&t| !tv.is_content(t)) {
                    return Err(Error::invalid(format!("text stream contains special token {bad}")));
                }
                Ok(JointSequence {
                    audio: vec![av.pad(); text.len()],
                    text,
                    delay: 0,
                })
            }
        }
    }
}

/// Teacher-forced trainer holding the optimizer over the stage's trainable
/// set. Only that set is registered, so nothing else can change.
pub struct Trainer<'m> {
    pub model: &'m DuoLm,
    pub trainable: TrainableSet,
    pub instruction: Vec<usize>,
    pub config: TrainConfig,
    opt: AdamW,
    total_steps: u64,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m DuoLm, store: &ParamStore, config: TrainConfig, total_steps: u64) -> Result<Self> {
        Self::with_trainable(model, store, model.trainable_set(store), config, total_steps)
    }

    /// Like [`Trainer::new`] but updating an explicit parameter set instead
    /// of the stage's policy (e.g. everything, for capacity checks).
    pub fn with_trainable(
        model: &'m DuoLm,
        store: &ParamStore,
        trainable: TrainableSet,
        config: TrainConfig,
        total_steps: u64,
    ) -> Result<Self> {
        config.validate("train")?;
        let opt = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..Default::default()
            },
            store,
            &trainable,
        )?;
        Ok(Self {
            model,
            trainable,
            instruction: vec![model.text_vocab().instruction()],
            config,
            opt,
            total_steps: total_steps.max(1),
        })
    }

    fn lr_at(&self, step: u64) -> f64 {
        let progress = (step as f64 / self.total_steps as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let r = self.config.lr_final_ratio;
        self.config.lr * (r + (1.0 - r) * cosine)
    }

    /// One optimizer step on a batch. Losses are per-token means over the
    /// non-PAD targets of the whole batch; `total = text + λ·audio`.
    pub fn train_step(&mut self, store: &mut ParamStore, batch: &[&Example]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::invalid("train_step: empty batch"));
        }
        let seqs: Vec<JointSequence> = batch
            .iter()
            .map(|ex| self.model.joint_sequence(ex))
            .collect::<Result<_>>()?;
        let (tv, av) = (self.model.text_vocab(), self.model.audio_vocab());
        let nt: usize = seqs.iter().map(|s| s.text.iter().filter(|&&t| t != tv.pad()).count()).sum();
        let na: usize = seqs.iter().map(|s| s.audio.iter().filter(|&&t| t != av.pad()).count()).sum();
        let lambda = self.model.config.audio_loss_weight;
        let items: Vec<(&Example, &JointSequence)> = batch.iter().copied().zip(&seqs).collect();
        let model = self.model;
        let instruction = &self.instruction;
        let (mut grads, stats) = batch_gradients(store, &self.trainable, &items, |g, (ex, seq)| {
            let p = g.input(ex.prefix.clone());
            let (text, audio, _, _) =
                model.losses(g, p, instruction, seq, 1.0 / nt.max(1) as f64, 1.0 / na.max(1) as f64)?;
            let tl = g.value(text).item();
            match audio {
                Some(a) => {
                    let al = g.value(a).item();
                    let weighted = g.scale(a, lambda)?;
                    let total = g.add(text, weighted)?;
                    Ok((total, vec![tl, al]))
                }
                None => Ok((text, vec![tl, 0.0])),
            }
        })?;
        if self.config.grad_clip > 0.0 {
            let norm = grads.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
            if norm > self.config.grad_clip {
                let s = self.config.grad_clip / norm;
                grads.values_mut().flatten().for_each(|v| *v *= s);
            }
        }
        self.opt.config.lr = self.lr_at(self.opt.step_count());
        self.opt.step(store, &grads)?;
        Ok(StepLog {
            step: self.opt.step_count(),
            text_loss: stats[0],
            audio_loss: stats[1],
            total: stats[0] + lambda * stats[1],
        })
    }
}

/// Shuffled minibatch training for `config.epochs` epochs (or until
/// `max_steps`). `on_step` sees every step's losses.
pub fn train(
    model: &DuoLm,
    store: &mut ParamStore,
    examples: &[Example],
    config: &TrainConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if examples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let per_epoch = examples.len().div_ceil(config.batch_size.max(1)) as u64;
    let mut total = per_epoch * config.epochs as u64;
    if config.max_steps > 0 {
        total = total.min(config.max_steps as u64);
    }
    let mut trainer = Trainer::new(model, store, config.clone(), total)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut logs = Vec::new();
    'outer: for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for idx in chunks_of(&order, config.batch_size) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let log = trainer.train_step(store, &batch)?;
            on_step(&log);
            logs.push(log);
            if log.step >= total {
                break 'outer;
            }
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::duolm::DuoLmConfig;
    use crate::vocab::{AudioVocab, TextVocab};

    fn toy() -> DuoLmConfig {
        DuoLmConfig {
            d_model: 16,
            n_shared: 1,
            n_post: 1,
            heads: 2,
            ff_dim: 32,
            text_vocab: TextVocab::new(6),
            audio_vocab: AudioVocab::new(9),
            delay: 2,
            max_positions: 40,
            ..Default::default()
        }
    }

    fn examples(n: usize) -> Vec<Example> {
        let mut rng = Rng::new(11);
        (0..n)
            .map(|_| Example {
                prefix: rng.normal_tensor(&[3, 16], 1.0),
                text: (0..3).map(|_| rng.below(6)).collect(),
                audio: (0..5).map(|_| rng.below(9)).collect(),
            })
            .collect()
    }

    #[test]
    fn one_step_touches_only_policy_set() {
        let m = DuoLm::new(toy(), Stage::Duo).unwrap();
        let mut store = ParamStore::new();
        m.init(&mut store, &mut Rng::new(0));
        let before = store.clone();
        let ex = examples(2);
        let mut t = Trainer::new(&m, &store, TrainConfig::default(), 10).unwrap();
        t.train_step(&mut store, &[&ex[0], &ex[1]]).unwrap();
        let changed = before.diff_names(&store);
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|n| t.trainable.contains(n)));
    }

    #[test]
    fn zero_audio_weight_freezes_audio_only_params() {
        let m = DuoLm::new(
            DuoLmConfig {
                audio_loss_weight: 0.0,
                ..toy()
            },
            Stage::Duo,
        )
        .unwrap();
        let mut store = ParamStore::new();
        m.init(&mut store, &mut Rng::new(0));
        let before = store.clone();
        let ex = examples(2);
        let mut t = Trainer::new(&m, &store, TrainConfig::default(), 10).unwrap();
        t.train_step(&mut store, &[&ex[0], &ex[1]]).unwrap();
        let changed = before.diff_names(&store);
        assert!(changed.iter().any(|n| n.starts_with("lora.")));
        assert!(!changed.iter().any(|n| n.starts_with("audio_post.")
            || n.starts_with("speech_out.")
            || n == "audio_head.proj.weight"));
    }

    #[test]
    fn loss_decreases() {
        let m = DuoLm::new(toy(), Stage::Duo).unwrap();
        let mut store = ParamStore::new();
        m.init(&mut store, &mut Rng::new(0));
        let ex = examples(4);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 1e-2,
            ..Default::default()
        };
        let logs = train(&m, &mut store, &ex, &cfg, &mut Rng::new(1), |_| {}).unwrap();
        assert!(logs.last().unwrap().total < 0.5 * logs[0].total, "{:?}", logs.last());
    }
}
