//! Self-checks runnable from a fresh checkout (`duospeech verify`).

use std::collections::BTreeSet;

use crate::duolm::train::{Example, TrainConfig, Trainer};
use crate::duolm::{build_joint_sequence, DuoLm, DuoLmConfig, FuseMode, JointSequence, Stage};
use crate::error::Result;
use crate::flowdec::{ChunkCond, FlowConfig, FlowDecoder, SpeakerPrompt};
use crate::fsq::FsqConfig;
use crate::numerics::{grad_check_params, primitive_suite, Graph, ParamStore, Rng, Tensor, TrainableSet};
use crate::vocab::{AudioVocab, TextVocab};

/// Tolerance for grad checks through composite models.
pub const MODEL_GRAD_TOL: f64 = 1e-4;
/// Tolerance between merged-weight and adapter forwards.
pub const MERGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Two-layer (one shared, one post) duo model small enough for exhaustive
/// finite differences.
pub fn toy_duolm_config() -> DuoLmConfig {
    DuoLmConfig {
        d_model: 8,
        n_shared: 1,
        n_post: 1,
        heads: 2,
        ff_dim: 16,
        text_vocab: TextVocab::new(6),
        audio_vocab: AudioVocab::new(9),
        delay: 2,
        lora_rank: 2,
        lora_alpha: 4.0,
        max_positions: 24,
        ..Default::default()
    }
}

/// A toy duo model with every LoRA `B` randomized so adapters contribute.
pub fn toy_duolm(seed: u64) -> Result<(DuoLm, ParamStore)> {
    let model = DuoLm::new(toy_duolm_config(), Stage::Duo)?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    model.init(&mut store, &mut rng);
    let bs: Vec<String> = store.names().filter(|n| n.starts_with("lora.") && n.ends_with(".b")).cloned().collect();
    for b in bs {
        let shape = store.get(&b)?.shape().to_vec();
        store.insert(b, rng.normal_tensor(&shape, 0.3));
    }
    Ok((model, store))
}

fn toy_example(model: &DuoLm, rng: &mut Rng) -> Result<(Tensor, JointSequence)> {
    let (tv, av) = (model.text_vocab(), model.audio_vocab());
    let text: Vec<usize> = (0..3).map(|_| rng.below(tv.words)).chain([tv.eos()]).collect();
    let audio: Vec<usize> = (0..4).map(|_| rng.below(av.codebook)).chain([av.eos()]).collect();
    let prefix = rng.normal_tensor(&[3, model.config.d_model], 1.0);
    Ok((prefix, build_joint_sequence(&text, &audio, model.config.delay, tv, av)?))
}

/// Every parameter except attention key biases. Softmax is invariant to a
/// per-row shift of the scores, so a key bias has an identically zero
/// gradient and its relative error would measure only rounding noise.
pub fn checkable(store: &ParamStore) -> TrainableSet {
    store.names().filter(|n| !n.ends_with("attn.k.bias")).cloned().collect()
}

/// Worst relative error of the analytic gradient of the teacher-forced
/// text + audio loss over all toy-model parameters.
pub fn duolm_grad_check(seed: u64) -> Result<f64> {
    let (model, store) = toy_duolm(seed)?;
    let (prefix, seq) = toy_example(&model, &mut Rng::new(seed).split(1))?;
    let instruction = [model.text_vocab().instruction()];
    grad_check_params(
        &store,
        &checkable(&store),
        |g| {
            let p = g.input(prefix.clone());
            let (t, a, _, _) = model.losses(g, p, &instruction, &seq, 1.0, 1.0)?;
            g.add(t, a.expect("duo"))
        },
        1e-5,
    )
}

fn toy_flow_config() -> FlowConfig {
    FlowConfig {
        chunk_size: 3,
        n_mels: 3,
        lookback_frames: 2,
        cond_dim: 2,
        token_dim: 3,
        hidden: 6,
        codebook_size: 5,
        ..Default::default()
    }
}

/// Worst relative error of the flow-matching loss gradient over the
/// velocity-network parameters, with fixed `t` and noise.
pub fn cfm_grad_check(seed: u64) -> Result<f64> {
    let flow = FlowDecoder::new(toy_flow_config())?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    flow.init(&mut store, &mut rng);
    let c = &flow.config;
    let cond = ChunkCond {
        tokens: vec![1, 4, 0],
        speaker: SpeakerPrompt::from_id(0, c.cond_dim, seed).embedding,
        lookback: rng.normal_tensor(&[c.lookback_frames, c.n_mels], 1.0),
    };
    let x1 = rng.normal_tensor(&[3 * c.frames_per_token, c.n_mels], 1.0);
    let noise = rng.split(9);
    grad_check_params(
        &store,
        &TrainableSet::all(&store),
        |g| flow.cfm_loss(g, &x1, &cond, &mut noise.clone()),
        1e-5,
    )
}

/// Result of probing `∂ audio_logits[s] / ∂ text_input[j]` on a toy model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookaheadProbe {
    /// Largest |∂| over all `j > s`; causality requires exactly 0.
    pub max_future: f64,
    /// Smallest row norm of ∂ over all `j ≤ s`; must be positive.
    pub min_past: f64,
}

/// Jacobian probe of the audio head with respect to the text-embedding
/// rows of the joint input, one backward pass per audio step.
pub fn lookahead_probe(model: &DuoLm, store: &ParamStore, prefix: &Tensor, seq: &JointSequence, seed: u64) -> Result<LookaheadProbe> {
    let (tv, av) = (model.text_vocab(), model.audio_vocab());
    let (text_in, audio_in) = seq.inputs(tv, av);
    let s_len = seq.len();
    let instruction = [tv.instruction()];
    let text_rows = {
        let mut g = Graph::with_params(store, None);
        let v = model.fuse_embeddings(&mut g, &text_in, &audio_in, FuseMode::TextOnly)?;
        g.value(v).clone()
    };
    let audio_rows = {
        let mut g = Graph::with_params(store, None);
        let t = model.fuse_embeddings(&mut g, &text_in, &audio_in, FuseMode::ProbeSum)?;
        let e = model.fuse_embeddings(&mut g, &text_in, &audio_in, FuseMode::TextOnly)?;
        let a = g.sub(t, e)?;
        g.value(a).clone()
    };
    let mut rng = Rng::new(seed);
    let mut probe = LookaheadProbe {
        max_future: 0.0,
        min_past: f64::INFINITY,
    };
    for s in 0..s_len {
        let mut g = Graph::with_params(store, None);
        let p = g.input(prefix.clone());
        let ins = {
            let et = g.param("text_embed")?;
            g.embedding(et, &instruction, None)?
        };
        let prompt = g.concat_rows(&[p, ins])?;
        let text = g.leaf(text_rows.clone());
        let audio = g.input(audio_rows.clone());
        let sum = g.add(text, audio)?;
        let joint = g.scale(sum, 0.5)?;
        let logits = model.forward_rows(&mut g, prompt, joint)?;
        let a = logits.audio.expect("duo model");
        let cols = g.value(a).cols();
        let w = Tensor::from_fn(&[s_len, cols], |i| if i / cols == s { rng.normal() } else { 0.0 });
        let w = g.input(w);
        let y = g.mul(a, w)?;
        let y = g.sum(y)?;
        g.backward(y)?;
        let grad = g.grad(text).expect("leaf has a gradient").to_vec();
        let d = text_rows.cols();
        for j in 0..s_len {
            let row = &grad[j * d..(j + 1) * d];
            if j > s {
                probe.max_future = row.iter().fold(probe.max_future, |m, v| m.max(v.abs()));
            } else {
                probe.min_past = probe.min_past.min(row.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
    }
    Ok(probe)
}

/// Checks the alignment laws of one joint sequence against an independent
/// reading of the rule. Returns the first violation.
pub fn check_alignment(text: &[usize], audio: &[usize], delay: usize, seq: &JointSequence, tv: TextVocab, av: AudioVocab) -> std::result::Result<(), String> {
    let s = text.len().max(audio.len() + delay);
    if seq.text.len() != s || seq.audio.len() != s {
        return Err(format!("length {} / {} ≠ {s}", seq.text.len(), seq.audio.len()));
    }
    for i in 0..s {
        let want_t = if i < text.len() { text[i] } else { tv.pad() };
        if seq.text[i] != want_t {
            return Err(format!("text[{i}] = {} ≠ {want_t}", seq.text[i]));
        }
        let want_a = if i < delay || i >= delay + audio.len() { av.pad() } else { audio[i - delay] };
        if seq.audio[i] != want_a {
            return Err(format!("audio[{i}] = {} ≠ {want_a}", seq.audio[i]));
        }
    }
    Ok(())
}

fn grad_suite(seed: u64) -> Result<SuiteReport> {
    let ops = primitive_suite(seed)?;
    let failed: Vec<String> = ops
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{} {:.2e}", o.op, o.max_rel_error))
        .collect();
    let worst_op = ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let model = duolm_grad_check(seed)?;
    let cfm = cfm_grad_check(seed)?;
    let passed = failed.is_empty() && model < MODEL_GRAD_TOL && cfm < MODEL_GRAD_TOL;
    Ok(SuiteReport::new(
        "grad-check",
        passed,
        format!(
            "{} ops (worst {worst_op:.2e}{}), duolm {model:.2e}, cfm {cfm:.2e}",
            ops.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    ))
}

/// Exhaustive id ↔ code bijection and idempotent quantization of centers.
pub fn fsq_bijection(levels: &[usize]) -> Result<std::result::Result<usize, String>> {
    let fsq = FsqConfig::new(levels.to_vec())?;
    let mut seen = BTreeSet::new();
    for id in 0..fsq.codebook_size() {
        let code = fsq.token_to_code(id)?;
        if fsq.id_of(&code)? != id {
            return Ok(Err(format!("{levels:?}: id {id} does not round-trip")));
        }
        let q = fsq.quantize(&fsq.center_latent(&code))?;
        if q.code != code || q.id != id {
            return Ok(Err(format!("{levels:?}: center of {id} quantizes to {}", q.id)));
        }
        seen.insert(code);
    }
    if seen.len() != fsq.codebook_size() {
        return Ok(Err(format!("{levels:?}: {} distinct codes", seen.len())));
    }
    Ok(Ok(seen.len()))
}

fn fsq_suite() -> Result<SuiteReport> {
    let mut total = 0;
    for levels in [&[3, 3][..], &[5, 3], &[5, 5, 5]] {
        match fsq_bijection(levels)? {
            Ok(n) => total += n,
            Err(e) => return Ok(SuiteReport::new("fsq-bijection", false, e)),
        }
    }
    Ok(SuiteReport::new("fsq-bijection", true, format!("{total} codes")))
}

fn delay_suite(seed: u64) -> Result<SuiteReport> {
    let (tv, av) = (TextVocab::new(10), AudioVocab::new(20));
    let mut rng = Rng::new(seed);
    for case in 0..500 {
        let d = rng.below(6);
        let text: Vec<usize> = (0..rng.below(8)).map(|_| rng.below(tv.words)).chain([tv.eos()]).collect();
        let audio: Vec<usize> = (0..rng.below(16)).map(|_| rng.below(av.codebook)).chain([av.eos()]).collect();
        let seq = build_joint_sequence(&text, &audio, d, tv, av)?;
        if let Err(e) = check_alignment(&text, &audio, d, &seq, tv, av) {
            return Ok(SuiteReport::new("delay-alignment", false, format!("case {case}: {e}")));
        }
    }
    let (model, store) = toy_duolm(seed)?;
    let (prefix, seq) = toy_example(&model, &mut Rng::new(seed).split(2))?;
    let p = lookahead_probe(&model, &store, &prefix, &seq, seed)?;
    Ok(SuiteReport::new(
        "delay-alignment",
        p.max_future == 0.0 && p.min_past > 0.0,
        format!("500 cases; look-ahead max future {:e}, min past {:.2e}", p.max_future, p.min_past),
    ))
}

/// Compares streaming and offline decoding on `n` random utterances of
/// 1–8 chunks. Returns how many matched bit-for-bit.
pub fn streaming_equivalence(config: &FlowConfig, n: usize, seed: u64) -> Result<usize> {
    let flow = FlowDecoder::new(config.clone())?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    flow.init(&mut store, &mut rng);
    let c = config.chunk_size;
    let mut ok = 0;
    for u in 0..n {
        let chunks = 1 + rng.below(8);
        let len = (chunks - 1) * c + 1 + rng.below(c);
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(config.codebook_size)).collect();
        let spk = SpeakerPrompt::from_id(u % 3, config.cond_dim, seed);
        let offline = flow.decode_offline(&store, &tokens, &spk, u as u64)?;
        let mut stream = flow.stream(&store, spk, u as u64);
        let mut streamed = Vec::new();
        for &t in &tokens {
            streamed.extend(stream.push(t)?);
        }
        streamed.extend(stream.finish()?);
        let same = streamed.len() == chunks
            && offline.len() == chunks
            && streamed
                .iter()
                .zip(&offline)
                .enumerate()
                .all(|(i, (a, b))| a.chunk_index == i && b.chunk_index == i && a.frames.bit_eq(&b.frames));
        ok += usize::from(same);
    }
    Ok(ok)
}

fn streaming_suite(seed: u64) -> Result<SuiteReport> {
    let n = 50;
    let ok = streaming_equivalence(&FlowConfig::default(), n, seed)?;
    Ok(SuiteReport::new("streaming-equivalence", ok == n, format!("{ok}/{n} utterances bit-equal")))
}

/// `(B = 0 bit-equal, worst merged-vs-adapter difference over probes)`.
pub fn lora_laws(seed: u64, probes: usize) -> Result<(bool, f64)> {
    let cfg = toy_duolm_config();
    let plain = DuoLm::with_lora(cfg.clone(), Stage::Duo, false)?;
    let adapted = DuoLm::new(cfg.clone(), Stage::Duo)?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    adapted.init(&mut store, &mut rng);
    let (tv, av) = (cfg.text_vocab, cfg.audio_vocab);
    let logits = |m: &DuoLm, s: &ParamStore, prefix: &Tensor, t: &[usize], a: &[usize]| -> Result<(Tensor, Tensor)> {
        let mut g = Graph::with_params(s, None);
        let p = g.input(prefix.clone());
        let l = m.forward_step(&mut g, p, &[tv.instruction()], t, a, FuseMode::Average)?;
        Ok((g.value(l.text).clone(), g.value(l.audio.expect("duo")).clone()))
    };
    let mut inputs = Vec::with_capacity(probes);
    for _ in 0..probes {
        let n = 1 + rng.below(6);
        let rows = 1 + rng.below(4);
        let prefix = rng.normal_tensor(&[rows, cfg.d_model], 1.0);
        let t: Vec<usize> = std::iter::once(tv.bos()).chain((1..n).map(|_| rng.below(tv.words))).collect();
        let a: Vec<usize> = std::iter::once(av.bos()).chain((1..n).map(|_| rng.below(av.codebook))).collect();
        inputs.push((prefix, t, a));
    }
    let mut identity = true;
    for (prefix, t, a) in &inputs {
        let (x, y) = logits(&adapted, &store, prefix, t, a)?;
        let (u, v) = logits(&plain, &store, prefix, t, a)?;
        identity &= x.bit_eq(&u) && y.bit_eq(&v);
    }
    let bs: Vec<String> = store.names().filter(|n| n.starts_with("lora.") && n.ends_with(".b")).cloned().collect();
    for b in bs {
        let shape = store.get(&b)?.shape().to_vec();
        store.insert(b, rng.normal_tensor(&shape, 0.3));
    }
    let merged = adapted.merge_lora(&store)?;
    let mut worst: f64 = 0.0;
    for (prefix, t, a) in &inputs {
        let (x, y) = logits(&adapted, &store, prefix, t, a)?;
        let (u, v) = logits(&plain, &merged, prefix, t, a)?;
        for (p, q) in x.data().iter().chain(y.data()).zip(u.data().iter().chain(v.data())) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok((identity, worst))
}

fn lora_suite(seed: u64) -> Result<SuiteReport> {
    let (identity, worst) = lora_laws(seed, 100)?;
    Ok(SuiteReport::new(
        "lora-identity",
        identity && worst < MERGE_TOL,
        format!("B=0 bit-equal: {identity}; merged max diff {worst:.2e} over 100 probes"),
    ))
}

/// Trains a toy duo model for `steps` steps and returns the changed names
/// and the policy set.
pub fn freeze_policy(seed: u64, steps: usize) -> Result<(BTreeSet<String>, TrainableSet)> {
    let model = DuoLm::new(toy_duolm_config(), Stage::Duo)?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    model.init(&mut store, &mut rng);
    let before = store.clone();
    let examples: Vec<Example> = (0..8)
        .map(|_| Example {
            prefix: rng.normal_tensor(&[3, model.config.d_model], 1.0),
            text: (0..1 + rng.below(4)).map(|_| rng.below(model.text_vocab().words)).collect(),
            audio: (0..1 + rng.below(8)).map(|_| rng.below(model.audio_vocab().codebook)).collect(),
        })
        .collect();
    let mut trainer = Trainer::new(&model, &store, TrainConfig::default(), steps as u64)?;
    for step in 0..steps {
        let batch: Vec<&Example> = (0..4).map(|i| &examples[(4 * step + i) % examples.len()]).collect();
        trainer.train_step(&mut store, &batch)?;
    }
    Ok((before.diff_names(&store), model.trainable_set(&store)))
}

fn freeze_suite(seed: u64) -> Result<SuiteReport> {
    let (changed, policy) = freeze_policy(seed, 20)?;
    let outside: Vec<&String> = changed.iter().filter(|n| !policy.contains(n)).collect();
    Ok(SuiteReport::new(
        "freeze-policy",
        outside.is_empty() && !changed.is_empty(),
        if outside.is_empty() {
            format!("{} of {} policy tensors changed, none outside", changed.len(), policy.len())
        } else {
            format!("changed outside the policy: {outside:?}")
        },
    ))
}

/// Runs every suite; an `Err` inside a suite becomes a failed report.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    let suites: [(&'static str, Box<dyn Fn() -> Result<SuiteReport>>); 6] = [
        ("grad-check", Box::new(move || grad_suite(seed))),
        ("fsq-bijection", Box::new(fsq_suite)),
        ("delay-alignment", Box::new(move || delay_suite(seed))),
        ("streaming-equivalence", Box::new(move || streaming_suite(seed))),
        ("lora-identity", Box::new(move || lora_suite(seed))),
        ("freeze-policy", Box::new(move || freeze_suite(seed))),
    ];
    suites
        .iter()
        .map(|(name, f)| f().unwrap_or_else(|e| SuiteReport::new(name, false, format!("error: {e}"))))
        .collect()
}
