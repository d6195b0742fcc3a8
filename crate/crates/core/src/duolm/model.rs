use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lora::{LoraSpec, LORA_PREFIX};
use super::sequence::JointSequence;
use crate::container::{kind, Checkpoint};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::nn::{causal_mask, init_embedding, DecoderBlock, LayerNorm, Linear};
use crate::numerics::{softmax_in_place, Graph, ParamStore, Rng, Tensor, TrainableSet, Var};
use crate::vocab::{AudioVocab, TextVocab};

/// Parameters of the text-only base model.
pub const BASE_PREFIXES: [&str; 6] = ["text_embed", "pos_embed", "shared.", "text_post.", "text_norm.", "text_head."];

/// The only parameters updated when extending the base to speech output:
/// audio post-LM, LoRA adapters, audio LM head (including the audio input
/// embedding) and the speech-out projection.
pub const AUDIO_POLICY_PREFIXES: [&str; 4] = ["audio_post.", LORA_PREFIX, "audio_head.", "speech_out."];

const TEXT_EMBED: &str = "text_embed";
const AUDIO_EMBED: &str = "audio_head.embed";
const POS_EMBED: &str = "pos_embed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DuoLmConfig {
    pub d_model: usize,
    pub n_shared: usize,
    pub n_post: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub text_vocab: TextVocab,
    pub audio_vocab: AudioVocab,
    pub delay: usize,
    pub audio_loss_weight: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_positions: usize,
    pub embed_std: f64,
}

impl Default for DuoLmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_shared: 2,
            n_post: 2,
            heads: 4,
            ff_dim: 128,
            text_vocab: TextVocab::new(24),
            audio_vocab: AudioVocab::new(125),
            delay: 3,
            audio_loss_weight: 1.0,
            lora_rank: 4,
            lora_alpha: 8.0,
            max_positions: 96,
            embed_std: 0.5,
        }
    }
}

impl DuoLmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_post", self.n_post),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("lora_rank", self.lora_rank),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::config(format!("duolm.{name}"), "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config("duolm.heads", "d_model must be divisible by heads"));
        }
        if self.text_vocab.words == 0 || self.audio_vocab.codebook == 0 {
            return Err(Error::config("duolm.vocab", "vocabularies must have content tokens"));
        }
        if !(self.audio_loss_weight >= 0.0) {
            return Err(Error::config("duolm.audio_loss_weight", "must be ≥ 0"));
        }
        if !(self.lora_alpha.is_finite()) {
            return Err(Error::config("duolm.lora_alpha", "must be finite"));
        }
        Ok(())
    }

    pub fn lora(&self) -> LoraSpec {
        LoraSpec {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
        }
    }
}

/// Which parts of the network exist and are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Speech-to-text base: text embedding, shared layers, text post-LM.
    TextOnly,
    /// Base plus audio branch and LoRA adapters on the base layers.
    Duo,
}

/// How the two stream embeddings combine into one input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    /// `0.5·(E_t + E_a)`, the model's input rule.
    Average,
    /// `E_t + E_a`: undoes the averaging factor so that with PAD_a audio
    /// inputs (zero embedding) the rows equal the text-only model's inputs.
    ProbeSum,
    /// `E_t` alone, as used by the text-only model.
    TextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Per-step logits for the joint rows only.
#[derive(Debug, Clone, Copy)]
pub struct Logits {
    pub text: Var,
    pub audio: Option<Var>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: Vec<usize>,
    pub audio: Vec<usize>,
    /// Raw per-step streams, specials included.
    pub text_steps: Vec<usize>,
    pub audio_steps: Vec<usize>,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct DuoLm {
    pub config: DuoLmConfig,
    pub stage: Stage,
    shared: Vec<DecoderBlock>,
    text_post: Vec<DecoderBlock>,
    text_norm: LayerNorm,
    text_head: Linear,
    speech_out: Linear,
    audio_post: Vec<DecoderBlock>,
    audio_norm: LayerNorm,
    audio_head: Linear,
}

impl DuoLm {
    pub fn new(config: DuoLmConfig, stage: Stage) -> Result<Self> {
        Self::with_lora(config, stage, stage == Stage::Duo)
    }

    /// `lora = false` builds the adapter-free network even for the duo
    /// stage (used to check merged weights).
    pub fn with_lora(config: DuoLmConfig, stage: Stage, lora: bool) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let block = |prefix: &str, i| DecoderBlock::new(&format!("{prefix}.{i}"), d, config.heads, config.ff_dim);
        let mut shared: Vec<DecoderBlock> = (0..config.n_shared).map(|i| block("shared", i)).collect();
        let mut text_post: Vec<DecoderBlock> = (0..config.n_post).map(|i| block("text_post", i)).collect();
        if lora {
            let spec = config.lora();
            for b in shared.iter_mut().chain(text_post.iter_mut()) {
                for lin in b.linears_mut() {
                    lin.lora = Some(spec);
                }
            }
        }
        Ok(Self {
            shared,
            text_post,
            text_norm: LayerNorm::new("text_norm", d),
            text_head: Linear::new("text_head", d, config.text_vocab.size()),
            speech_out: Linear::new("speech_out", d, d),
            audio_post: (0..config.n_post).map(|i| block("audio_post", i)).collect(),
            audio_norm: LayerNorm::new("audio_post.norm", d),
            audio_head: Linear::new("audio_head.proj", d, config.audio_vocab.size()),
            config,
            stage,
        })
    }

    pub fn text_vocab(&self) -> TextVocab {
        self.config.text_vocab
    }

    pub fn audio_vocab(&self) -> AudioVocab {
        self.config.audio_vocab
    }

    /// Random initialization of the text-only base.
    pub fn init_base(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = &self.config;
        let tv = c.text_vocab;
        init_embedding(store, TEXT_EMBED, tv.size(), c.d_model, c.embed_std, Some(tv.pad()), rng);
        init_embedding(store, POS_EMBED, c.max_positions, c.d_model, 0.1, None, rng);
        for b in self.shared.iter().chain(&self.text_post) {
            b.init(store, rng);
        }
        self.text_norm.init(store);
        self.text_head.init(store, rng);
    }

    /// Adds the randomly initialized audio branch and zero-delta adapters.
    pub fn init_audio(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = &self.config;
        let av = c.audio_vocab;
        init_embedding(store, AUDIO_EMBED, av.size(), c.d_model, c.embed_std, Some(av.pad()), rng);
        self.speech_out.init(store, rng);
        for b in &self.audio_post {
            b.init(store, rng);
        }
        self.audio_norm.init(store);
        self.audio_head.init(store, rng);
        let spec = c.lora();
        let mut targets = Vec::new();
        for b in self.shared.iter().chain(&self.text_post) {
            let mut b = b.clone();
            for lin in b.linears_mut() {
                targets.push((lin.name.clone(), lin.d_in, lin.d_out));
            }
        }
        for (name, d_in, d_out) in targets {
            spec.init(store, &name, d_in, d_out, rng);
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.init_base(store, rng);
        if self.stage == Stage::Duo {
            self.init_audio(store, rng);
        }
    }

    /// Names this stage updates: the whole base for `TextOnly`, exactly the
    /// audio policy set for `Duo`.
    pub fn trainable_set(&self, store: &ParamStore) -> TrainableSet {
        match self.stage {
            Stage::TextOnly => store.select_prefixed(&BASE_PREFIXES),
            Stage::Duo => store.select_prefixed(&AUDIO_POLICY_PREFIXES),
        }
    }

    /// Input rows for the joint steps.
    pub fn fuse_embeddings(&self, g: &mut Graph, text: &[usize], audio: &[usize], mode: FuseMode) -> Result<Var> {
        let tv = self.text_vocab();
        if let Some(&bad) = text.iter().find(|&&t| t >= tv.size()) {
            return Err(Error::invalid(format!("text token {bad} out of vocabulary")));
        }
        let et = g.param(TEXT_EMBED)?;
        let et = g.embedding(et, text, Some(tv.pad()))?;
        if mode == FuseMode::TextOnly {
            return Ok(et);
        }
        let av = self.audio_vocab();
        if audio.len() != text.len() {
            return Err(Error::Shape {
                op: "fuse_embeddings",
                lhs: vec![text.len()],
                rhs: vec![audio.len()],
            });
        }
        if let Some(&bad) = audio.iter().find(|&&t| t >= av.size()) {
            return Err(Error::invalid(format!("audio token {bad} out of vocabulary")));
        }
        let ea = g.param(AUDIO_EMBED)?;
        let ea = g.embedding(ea, audio, Some(av.pad()))?;
        let sum = g.add(et, ea)?;
        match mode {
            FuseMode::Average => g.scale(sum, 0.5),
            _ => Ok(sum),
        }
    }

    /// Instruction rows appended after the speech prefix.
    fn prompt(&self, g: &mut Graph, prefix: Var, instruction: &[usize]) -> Result<Var> {
        if instruction.is_empty() {
            return Ok(prefix);
        }
        let et = g.param(TEXT_EMBED)?;
        let ins = g.embedding(et, instruction, None)?;
        g.concat_rows(&[prefix, ins])
    }

    /// Runs the network over `[prompt rows; joint rows]` and returns logits
    /// for the joint rows. Causal over the whole sequence.
    pub fn forward_rows(&self, g: &mut Graph, prompt: Var, joint: Var) -> Result<Logits> {
        let s = g.value(joint).rows();
        if s == 0 {
            return Err(Error::invalid("forward: empty prefix"));
        }
        let x = g.concat_rows(&[prompt, joint])?;
        let n = g.value(x).rows();
        if n > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence of {n} rows exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let pos = g.param(POS_EMBED)?;
        let pos = g.slice_rows(pos, 0, n)?;
        let mut h = g.add(x, pos)?;
        let mask = causal_mask(n);
        for b in &self.shared {
            h = b.forward(g, h, &mask)?;
        }
        let shared = h;

        let mut t = shared;
        for b in &self.text_post {
            t = b.forward(g, t, &mask)?;
        }
        let t = g.slice_rows(t, n - s, s)?;
        let t = self.text_norm.forward(g, t)?;
        let text = self.text_head.forward(g, t)?;

        let audio = if self.stage == Stage::Duo {
            let mut a = self.speech_out.forward(g, shared)?;
            for b in &self.audio_post {
                a = b.forward(g, a, &mask)?;
            }
            let a = g.slice_rows(a, n - s, s)?;
            let a = self.audio_norm.forward(g, a)?;
            Some(self.audio_head.forward(g, a)?)
        } else {
            None
        };
        Ok(Logits { text, audio })
    }

    pub fn forward_step(
        &self,
        g: &mut Graph,
        prefix: Var,
        instruction: &[usize],
        text_in: &[usize],
        audio_in: &[usize],
        mode: FuseMode,
    ) -> Result<Logits> {
        let prompt = self.prompt(g, prefix, instruction)?;
        let joint = self.fuse_embeddings(g, text_in, audio_in, mode)?;
        self.forward_rows(g, prompt, joint)
    }

    fn fuse_mode(&self) -> FuseMode {
        match self.stage {
            Stage::TextOnly => FuseMode::TextOnly,
            Stage::Duo => FuseMode::Average,
        }
    }

    /// Teacher-forced cross-entropies. Returns `(text, audio)` loss nodes
    /// scaled by the given factors and the number of non-PAD targets in
    /// each stream. PAD targets are excluded from both losses.
    pub fn losses(
        &self,
        g: &mut Graph,
        prefix: Var,
        instruction: &[usize],
        seq: &JointSequence,
        text_scale: f64,
        audio_scale: f64,
    ) -> Result<(Var, Option<Var>, usize, usize)> {
        if seq.is_empty() {
            return Err(Error::invalid("train_step: length-0 sequence"));
        }
        let (tv, av) = (self.text_vocab(), self.audio_vocab());
        let (text_in, audio_in) = seq.inputs(tv, av);
        let logits = self.forward_step(g, prefix, instruction, &text_in, &audio_in, self.fuse_mode())?;
        let tt: Vec<Option<usize>> = seq.text.iter().map(|&t| (t != tv.pad()).then_some(t)).collect();
        let nt = tt.iter().flatten().count();
        let text = g.cross_entropy(logits.text, &tt, text_scale)?;
        let (audio, na) = match logits.audio {
            Some(a) => {
                let at: Vec<Option<usize>> = seq.audio.iter().map(|&t| (t != av.pad()).then_some(t)).collect();
                let na = at.iter().flatten().count();
                (Some(g.cross_entropy(a, &at, audio_scale)?), na)
            }
            None => (None, 0),
        };
        Ok((text, audio, nt, na))
    }

    /// Autoregressive decoding from a speech prefix. Text is restricted to
    /// content tokens and EOS_t and becomes PAD_t after EOS_t; audio is
    /// PAD_a for the first `D` steps, then restricted to content tokens and
    /// EOS_a. Stops at EOS_a or after `max_steps` (flagged truncated).
    pub fn generate(
        &self,
        store: &ParamStore,
        prefix: &Tensor,
        instruction: &[usize],
        max_steps: usize,
        decoding: Decoding,
    ) -> Result<Generation> {
        let (tv, av) = (self.text_vocab(), self.audio_vocab());
        let duo = self.stage == Stage::Duo;
        let mut rng = match decoding {
            Decoding::Temperature { temperature, seed } => {
                if !(temperature > 0.0) {
                    return Err(Error::invalid("temperature must be positive"));
                }
                Some(Rng::new(seed))
            }
            Decoding::Greedy => None,
        };
        let mut text_in = vec![tv.bos()];
        let mut audio_in = vec![av.bos()];
        let mut out = Generation {
            text: Vec::new(),
            audio: Vec::new(),
            text_steps: Vec::new(),
            audio_steps: Vec::new(),
            truncated: true,
        };
        let mut text_done = false;
        for step in 0..max_steps {
            let mut g = Graph::with_params(store, None);
            let p = g.input(prefix.clone());
            let logits = self.forward_step(&mut g, p, instruction, &text_in, &audio_in, self.fuse_mode())?;
            let last = text_in.len() - 1;
            let t_tok = if text_done {
                tv.pad()
            } else {
                pick(g.value(logits.text).row(last), |i| tv.is_content(i) || i == tv.eos(), decoding, &mut rng)
            };
            text_done |= t_tok == tv.eos();
            out.text_steps.push(t_tok);
            if tv.is_content(t_tok) {
                out.text.push(t_tok);
            }
            if !duo {
                if text_done {
                    out.truncated = false;
                    break;
                }
                text_in.push(t_tok);
                audio_in.push(av.pad());
                continue;
            }
            let a_tok = if step < self.config.delay {
                av.pad()
            } else {
                let a = logits.audio.expect("duo stage has audio logits");
                pick(g.value(a).row(last), |i| av.is_content(i) || i == av.eos(), decoding, &mut rng)
            };
            out.audio_steps.push(a_tok);
            if a_tok == av.eos() {
                out.truncated = false;
                break;
            }
            if av.is_content(a_tok) {
                out.audio.push(a_tok);
            }
            text_in.push(t_tok);
            audio_in.push(a_tok);
        }
        Ok(out)
    }

    /// Folds every adapter into its base weight and drops the adapter
    /// parameters. The result runs on [`DuoLm::with_lora`]`(.., false)`.
    pub fn merge_lora(&self, store: &ParamStore) -> Result<ParamStore> {
        let spec = self.config.lora();
        let mut out = store.clone();
        for b in self.shared.iter().chain(&self.text_post) {
            let mut b = b.clone();
            for lin in b.linears_mut() {
                let a = store.get(&LoraSpec::a_name(&lin.name))?.clone();
                let bm = store.get(&LoraSpec::b_name(&lin.name))?.clone();
                let adapter = super::lora::LoraAdapter::new(lin.name.clone(), a, bm, spec.alpha)?;
                let merged = adapter.merge(store.get(&lin.weight_name())?)?;
                out.insert(lin.weight_name(), merged);
                out.remove(&LoraSpec::a_name(&lin.name));
                out.remove(&LoraSpec::b_name(&lin.name));
            }
        }
        Ok(out)
    }

    /// Writes a `duolm` container. The frontend configuration travels with
    /// the model so the checkpoint is self-contained.
    pub fn save(&self, dir: impl AsRef<Path>, store: &ParamStore, step: u64, frontend: &FrontendConfig) -> Result<()> {
        let mut ckpt = Checkpoint::new(kind::DUOLM, store.clone());
        ckpt.step = step;
        ckpt.config = serde_json::json!({
            "model": self.config,
            "stage": self.stage,
            "frontend": frontend,
        });
        ckpt.trainable = self.trainable_set(store).iter().cloned().collect();
        ckpt.save(dir)
    }

    /// Loads a `duolm` container and checks it against its own config: every
    /// expected parameter present with the right shape and the trainable
    /// listing equal to the stage's freezing policy.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, FrontendConfig, ParamStore, u64)> {
        let dir = dir.as_ref();
        let ckpt = Checkpoint::load(dir, Some(kind::DUOLM))?;
        let config: DuoLmConfig = serde_json::from_value(ckpt.config["model"].clone())?;
        let stage: Stage = serde_json::from_value(ckpt.config["stage"].clone())?;
        let frontend: FrontendConfig = serde_json::from_value(ckpt.config["frontend"].clone())?;
        let model = Self::new(config, stage)?;
        let bad = |message: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        let mut reference = ParamStore::new();
        model.init(&mut reference, &mut Rng::new(0));
        for (name, t) in reference.iter() {
            let got = ckpt
                .params
                .get(name)
                .map_err(|_| bad(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(bad(format!("parameter `{name}` has shape {:?}, config implies {:?}", got.shape(), t.shape())));
            }
        }
        let policy: Vec<String> = model.trainable_set(&ckpt.params).iter().cloned().collect();
        if policy != ckpt.trainable {
            return Err(bad("trainable listing does not match the freezing policy".into()));
        }
        Ok((model, frontend, ckpt.params, ckpt.step))
    }
}

fn pick(row: &[f64], allowed: impl Fn(usize) -> bool, decoding: Decoding, rng: &mut Option<Rng>) -> usize {
    match decoding {
        Decoding::Greedy => {
            let mut best: Option<usize> = None;
            for (i, &v) in row.iter().enumerate() {
                if allowed(i) && best.is_none_or(|b| v > row[b]) {
                    best = Some(i);
                }
            }
            best.expect("at least one allowed token")
        }
        Decoding::Temperature { temperature, .. } => {
            let mut scaled: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(i, &v)| if allowed(i) { v / temperature } else { f64::NEG_INFINITY })
                .collect();
            softmax_in_place(&mut scaled);
            rng.as_mut().expect("sampler seeded").categorical(&scaled)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::duolm::build_joint_sequence;

    pub(crate) fn toy() -> DuoLmConfig {
        DuoLmConfig {
            d_model: 8,
            n_shared: 2,
            n_post: 1,
            heads: 2,
            ff_dim: 12,
            text_vocab: TextVocab::new(5),
            audio_vocab: AudioVocab::new(7),
            delay: 2,
            max_positions: 32,
            ..Default::default()
        }
    }

    fn setup(stage: Stage) -> (DuoLm, ParamStore) {
        let m = DuoLm::new(toy(), stage).unwrap();
        let mut s = ParamStore::new();
        m.init(&mut s, &mut Rng::new(3));
        (m, s)
    }

    #[test]
    fn logits_shapes() {
        let (m, s) = setup(Stage::Duo);
        let mut g = Graph::with_params(&s, None);
        let p = g.input(Rng::new(1).normal_tensor(&[3, 8], 1.0));
        let l = m.forward_step(&mut g, p, &[m.text_vocab().instruction()], &[5, 1, 2], &[7, 9, 9], FuseMode::Average).unwrap();
        assert_eq!(g.shape(l.text), &[3, 10]);
        assert_eq!(g.shape(l.audio.unwrap()), &[3, 10]);
        assert!(m.forward_step(&mut g, p, &[], &[], &[], FuseMode::Average).is_err());
    }

    #[test]
    fn fuse_is_average_and_pad_is_zero() {
        let (m, s) = setup(Stage::Duo);
        let mut g = Graph::with_params(&s, None);
        let f = m.fuse_embeddings(&mut g, &[1], &[m.audio_vocab().pad()], FuseMode::Average).unwrap();
        let et = s.get(TEXT_EMBED).unwrap().row(1).to_vec();
        for (a, b) in g.value(f).data().iter().zip(&et) {
            assert_eq!(*a, 0.5 * b);
        }
        assert!(m.fuse_embeddings(&mut g, &[99], &[1], FuseMode::Average).is_err());
        assert!(m.fuse_embeddings(&mut g, &[1], &[99], FuseMode::Average).is_err());
    }

    #[test]
    fn probe_mode_matches_text_only_model() {
        let base = DuoLm::new(toy(), Stage::TextOnly).unwrap();
        let mut store = ParamStore::new();
        base.init_base(&mut store, &mut Rng::new(5));
        let duo = DuoLm::new(toy(), Stage::Duo).unwrap();
        let mut duo_store = store.clone();
        duo.init_audio(&mut duo_store, &mut Rng::new(6));
        let prefix = Rng::new(7).normal_tensor(&[4, 8], 1.0);
        let text = [5, 0, 3, 2];
        let pads = [9; 4];
        let run = |m: &DuoLm, s: &ParamStore, mode| {
            let mut g = Graph::with_params(s, None);
            let p = g.input(prefix.clone());
            let l = m.forward_step(&mut g, p, &[8], &text, &pads, mode).unwrap();
            g.value(l.text).clone()
        };
        let a = run(&base, &store, FuseMode::TextOnly);
        let b = run(&duo, &duo_store, FuseMode::ProbeSum);
        assert!(a.bit_eq(&b));
        let c = run(&duo, &duo_store, FuseMode::Average);
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn checkpoint_round_trip_and_policy() {
        let (m, s) = setup(Stage::Duo);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), &s, 4, &FrontendConfig::default()).unwrap();
        let (m2, _, s2, step) = DuoLm::load(dir.path()).unwrap();
        assert_eq!(step, 4);
        assert_eq!(m2.stage, Stage::Duo);
        assert!(s.diff_names(&s2).is_empty());
        let ckpt = Checkpoint::load(dir.path(), None).unwrap();
        assert!(ckpt.trainable.iter().all(|n| AUDIO_POLICY_PREFIXES.iter().any(|p| n.starts_with(p))));
        assert!(ckpt.trainable.iter().any(|n| n.starts_with("lora.")));
        assert!(!ckpt.trainable.iter().any(|n| n.starts_with("shared.") || n.starts_with("text_")));
    }

    #[test]
    fn teacher_forced_losses_mask_pads() {
        let (m, s) = setup(Stage::Duo);
        let (tv, av) = (m.text_vocab(), m.audio_vocab());
        let seq = build_joint_sequence(&[1, 2, tv.eos()], &[3, 4, 5, av.eos()], 2, tv, av).unwrap();
        let mut g = Graph::with_params(&s, None);
        let p = g.input(Tensor::zeros(&[2, 8]));
        let (_, _, nt, na) = m.losses(&mut g, p, &[], &seq, 1.0, 1.0).unwrap();
        assert_eq!((nt, na), (3, 4));
    }

    #[test]
    fn generation_respects_delay_and_is_deterministic() {
        let (m, s) = setup(Stage::Duo);
        let prefix = Rng::new(2).normal_tensor(&[3, 8], 1.0);
        let a = m.generate(&s, &prefix, &[], 12, Decoding::Greedy).unwrap();
        let b = m.generate(&s, &prefix, &[], 12, Decoding::Greedy).unwrap();
        assert_eq!(a, b);
        for step in 0..2.min(a.audio_steps.len()) {
            assert_eq!(a.audio_steps[step], m.audio_vocab().pad());
        }
        let t = m
            .generate(&s, &prefix, &[], 12, Decoding::Temperature { temperature: 1.0, seed: 4 })
            .unwrap();
        assert_eq!(t, m.generate(&s, &prefix, &[], 12, Decoding::Temperature { temperature: 1.0, seed: 4 }).unwrap());
    }
}
