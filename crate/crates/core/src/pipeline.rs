//! End-to-end stages: each reads artifacts from disk, writes its own
//! output directory and nothing else.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{gen_corpus, load_manifest, write_manifest, Corpus, Utterance};
use crate::duolm::train::{train, Example, StepLog};
use crate::duolm::{Decoding, DuoLm, Stage};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport, Prediction};
use crate::flowdec::{
    chunk_examples, concat_chunks, pseudo_vocoder, save_mel, train_flow as fit_flow, write_wav, FlowDecoder,
    MelRenderer, SpeakerPrompt,
};
use crate::frontend::{warmup, AudioFeatureSeq, Frontend, FrontendConfig};
use crate::fsq::{FsqTokenizer, TrainLog};
use crate::numerics::{ParamStore, Rng};

pub const PREDICTIONS: &str = "predictions.jsonl";
pub const LOSS_CSV: &str = "loss.csv";

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn stage_rng(cfg: &RunConfig, stage: &str) -> Rng {
    Rng::new(cfg.seed).split_str(stage)
}

fn load_split(data: &Path, split: &str) -> Result<Vec<Utterance>> {
    load_manifest(data.join(format!("{split}.jsonl")))?.load_utterances()
}

/// `step,text_loss,audio_loss,total` rows.
pub fn loss_csv(logs: &[StepLog]) -> String {
    let mut out = String::from("step,text_loss,audio_loss,total\n");
    for l in logs {
        let _ = writeln!(out, "{},{},{},{}", l.step, l.text_loss, l.audio_loss, l.total);
    }
    out
}

/// Frozen-frontend speech prefixes paired with the target streams.
pub fn examples(frontend: &Frontend, store: &ParamStore, utterances: &[Utterance], frame_rate: f64) -> Result<Vec<Example>> {
    utterances
        .iter()
        .map(|u| {
            let seq = AudioFeatureSeq::new(u.features.clone(), frame_rate, frontend.config.feat_dim)?;
            Ok(Example {
                prefix: frontend.embed(store, &seq)?,
                text: u.record.tgt_text.clone(),
                audio: u.record.tgt_speech.clone(),
            })
        })
        .collect()
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    let corpus = gen_corpus(&cfg.data, cfg.seed)?;
    corpus.write(out)?;
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub epoch_loss: Vec<f64>,
}

/// Trains the FSQ speech tokenizer on the source features, labelled with
/// their frame-aligned source tokens.
pub fn train_tokenizer(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TokenizerReport> {
    let labelled = |u: Utterance| (u.features, u.record.src_tokens);
    let train_set: Vec<_> = load_split(data, "train")?.into_iter().map(labelled).collect();
    let dev_set: Vec<_> = load_split(data, "dev")?.into_iter().map(labelled).collect();
    let mut tok = FsqTokenizer::new(cfg.tokenizer.clone())?;
    let log: TrainLog = tok.train(&train_set, &mut stage_rng(cfg, "tokenizer"))?;
    let report = TokenizerReport {
        train_accuracy: log.frame_accuracy,
        dev_accuracy: tok.accuracy(&dev_set)?,
        epoch_loss: log.epoch_loss,
    };
    tok.save(out)?;
    write_text(&out.join("accuracy.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}

/// Warms up the speech frontend, then trains the text-only base model on
/// its frozen outputs. The checkpoint carries both.
pub fn pretrain_base(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<StepLog>> {
    let train_set = load_split(data, "train")?;
    let frontend = Frontend::new(cfg.frontend.clone())?;
    let mut rng = stage_rng(cfg, "pretrain");
    let mut store = ParamStore::new();
    frontend.init(&mut store, &mut rng);
    let pairs: Vec<_> = train_set
        .iter()
        .map(|u| (u.features.clone(), u.record.src_tokens.clone()))
        .collect();
    warmup(
        &frontend,
        &mut store,
        &pairs,
        cfg.data.frames_per_token,
        cfg.data.n_words,
        &cfg.warmup,
        &mut rng,
    )?;
    let ex = examples(&frontend, &store, &train_set, cfg.data.frame_rate_hz)?;
    let model = DuoLm::new(cfg.duolm.clone(), Stage::TextOnly)?;
    model.init_base(&mut store, &mut rng);
    let logs = train(&model, &mut store, &ex, &cfg.pretrain, &mut rng, |_| {})?;
    create(out)?;
    model.save(out, &store, logs.len() as u64, &frontend.config)?;
    write_text(&out.join(LOSS_CSV), &loss_csv(&logs))?;
    Ok(logs)
}

/// Adds the audio branch to a base checkpoint and trains the adaptation set.
pub fn train_s2st(cfg: &RunConfig, base: &Path, data: &Path, out: &Path) -> Result<Vec<StepLog>> {
    let (base_model, fcfg, mut store, _) = DuoLm::load(base)?;
    if base_model.stage != Stage::TextOnly {
        return Err(Error::invalid(format!("{} is not a base (text-only) checkpoint", base.display())));
    }
    let frontend = Frontend::new(fcfg)?;
    let train_set = load_split(data, "train")?;
    let ex = examples(&frontend, &store, &train_set, cfg.data.frame_rate_hz)?;
    let model = DuoLm::new(base_model.config.clone(), Stage::Duo)?;
    let mut rng = stage_rng(cfg, "s2st");
    model.init_audio(&mut store, &mut rng);
    let logs = train(&model, &mut store, &ex, &cfg.s2st, &mut rng, |_| {})?;
    create(out)?;
    model.save(out, &store, logs.len() as u64, &frontend.config)?;
    write_text(&out.join(LOSS_CSV), &loss_csv(&logs))?;
    Ok(logs)
}

pub fn renderer(cfg: &RunConfig) -> MelRenderer {
    MelRenderer {
        fsq: cfg.tokenizer.fsq.clone(),
        n_mels: cfg.flow.n_mels,
        frames_per_token: cfg.flow.frames_per_token,
        seed: cfg.seed,
    }
}

pub fn speaker(cfg: &RunConfig, id: usize) -> SpeakerPrompt {
    SpeakerPrompt::from_id(id, cfg.flow.cond_dim, cfg.seed)
}

/// Trains the flow decoder on rendered mel targets of the training speech
/// tokens. Returns the per-epoch loss.
pub fn train_flow(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<f64>> {
    let records = load_manifest(data.join("train.jsonl"))?.records;
    let render = renderer(cfg);
    let mut ex = Vec::new();
    for r in records.iter().take(cfg.flow_train.max_utterances) {
        let spk = speaker(cfg, r.speaker);
        let mel = render.render(&r.tgt_speech, &spk)?;
        ex.extend(chunk_examples(&cfg.flow, &r.tgt_speech, &mel, &spk)?);
    }
    let flow = FlowDecoder::new(cfg.flow.clone())?;
    let mut rng = stage_rng(cfg, "flow");
    let mut store = ParamStore::new();
    flow.init(&mut store, &mut rng);
    let losses = fit_flow(&flow, &mut store, &ex, &cfg.flow_train, &mut rng)?;
    flow.save(out, &store, &render)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    write_text(&out.join(LOSS_CSV), &csv)?;
    Ok(losses)
}

/// Noise seed for an utterance's flow decoding.
pub fn utterance_seed(cfg: &RunConfig, id: &str) -> u64 {
    stage_rng(cfg, "synth").split_str(id).next_u64()
}

pub struct TranslateOptions<'a> {
    pub flow: Option<&'a Path>,
    pub wav: bool,
}

/// Greedy speech-to-speech translation of every utterance in `input`.
/// Writes `predictions.jsonl`; with `wav`, also `wav/{id}.wav` and
/// `mel/{id}` per utterance with non-empty speech.
pub fn translate(cfg: &RunConfig, model_dir: &Path, input: &Path, out: &Path, opts: &TranslateOptions) -> Result<Vec<Prediction>> {
    let (model, fcfg, store, _) = DuoLm::load(model_dir)?;
    check_frontend(&fcfg, cfg)?;
    let frontend = Frontend::new(fcfg)?;
    let utterances = load_manifest(input)?.load_utterances()?;
    let flow = match opts.flow {
        Some(dir) => Some(FlowDecoder::load(dir)?),
        None if opts.wav => return Err(Error::invalid("--wav needs a flow decoder checkpoint")),
        None => None,
    };
    create(out)?;
    let instruction = [model.text_vocab().instruction()];
    let mut preds = Vec::with_capacity(utterances.len());
    for u in &utterances {
        let seq = AudioFeatureSeq::new(u.features.clone(), cfg.data.frame_rate_hz, frontend.config.feat_dim)?;
        let prefix = frontend.embed(&store, &seq)?;
        let g = model.generate(&store, &prefix, &instruction, cfg.eval.max_steps, Decoding::Greedy)?;
        if opts.wav && !g.audio.is_empty() {
            let (flow, flow_store, _) = flow.as_ref().expect("checked above");
            let spk = speaker(cfg, u.record.speaker);
            let chunks = flow.decode_offline(flow_store, &g.audio, &spk, utterance_seed(cfg, &u.record.id))?;
            let mel = concat_chunks(&chunks)?;
            save_mel(out.join("mel").join(&u.record.id), &mel)?;
            let wav_dir = out.join("wav");
            create(&wav_dir)?;
            let samples = pseudo_vocoder(&mel, &cfg.vocoder)?;
            write_wav(wav_dir.join(format!("{}.wav", u.record.id)), &samples, cfg.vocoder.sample_rate)?;
        }
        preds.push(Prediction {
            id: u.record.id.clone(),
            text: g.text,
            speech: g.audio,
            truncated: g.truncated,
        });
    }
    write_manifest(out.join(PREDICTIONS), &preds)?;
    Ok(preds)
}

fn check_frontend(ckpt: &FrontendConfig, cfg: &RunConfig) -> Result<()> {
    if ckpt.feat_dim != cfg.data.feat_dim {
        return Err(Error::config(
            "data.feat_dim",
            format!("checkpoint expects {} feature dims, config has {}", ckpt.feat_dim, cfg.data.feat_dim),
        ));
    }
    Ok(())
}

/// Scores `pred_dir/predictions.jsonl` against a reference manifest and
/// writes `report.json` and `report.csv` into `out`.
pub fn eval(pred_dir: &Path, reference: &Path, out: &Path) -> Result<EvalReport> {
    let pred = if pred_dir.is_dir() {
        pred_dir.join(PREDICTIONS)
    } else {
        pred_dir.to_path_buf()
    };
    let predictions: Vec<Prediction> = crate::data::read_jsonl(&pred)?;
    let manifest = load_manifest(reference)?;
    let corpus = Corpus::load(manifest.root())?;
    let report = evaluate(&predictions, &manifest.records, &corpus.table, corpus.text_vocab().unk())?;
    report.write(out)?;
    Ok(report)
}

/// Directory layout of a full run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer")
    }
    pub fn base(&self) -> PathBuf {
        self.root.join("base")
    }
    pub fn s2st(&self) -> PathBuf {
        self.root.join("s2st")
    }
    pub fn flow(&self) -> PathBuf {
        self.root.join("flow")
    }
    pub fn translate(&self) -> PathBuf {
        self.root.join("translate")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// gen-data → train-tokenizer → pretrain-base → train-s2st → train-flow →
/// translate (test split) → eval, all under `root`.
pub fn full_run(cfg: &RunConfig, root: &Path, wav: bool, mut progress: impl FnMut(&str)) -> Result<EvalReport> {
    cfg.validate()?;
    let l = RunLayout::new(root);
    create(root)?;
    write_text(&root.join("config.json"), &cfg.to_json()?)?;
    gen_data(cfg, &l.data())?;
    progress("gen-data");
    train_tokenizer(cfg, &l.data(), &l.tokenizer())?;
    progress("train-tokenizer");
    pretrain_base(cfg, &l.data(), &l.base())?;
    progress("pretrain-base");
    train_s2st(cfg, &l.base(), &l.data(), &l.s2st())?;
    progress("train-s2st");
    let flow = l.flow();
    if wav {
        train_flow(cfg, &l.data(), &flow)?;
        progress("train-flow");
    }
    let opts = TranslateOptions {
        flow: wav.then_some(flow.as_path()),
        wav,
    };
    let test = l.data().join("test.jsonl");
    translate(cfg, &l.s2st(), &test, &l.translate(), &opts)?;
    progress("translate");
    let report = eval(&l.translate(), &test, &l.eval())?;
    progress("eval");
    Ok(report)
}
