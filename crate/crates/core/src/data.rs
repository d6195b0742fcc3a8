//! Synthetic speech-translation corpus.
//!
//! Source "speech" is a sequence of feature frames: each source word
//! contributes `frames_per_token` frames equal to the word's prototype
//! vector plus seeded Gaussian noise. The target text is produced by a
//! word-level bijection followed by a local reordering: for each aligned
//! pair `(y[i], y[i+1])` with `i` even, the pair is swapped when `y[i]` is
//! odd. Target speech tokens come from a fixed expansion table mapping every
//! target word to 2–4 codebook ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{hex, kind, Checkpoint};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Tensor};
use crate::vocab::{AudioVocab, TextVocab};

pub const CORPUS_FILE: &str = "corpus.json";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_token: usize,
    pub feat_dim: usize,
    pub frame_rate_hz: f64,
    pub noise_std: f64,
    pub codebook_size: usize,
    pub min_expansion: usize,
    pub max_expansion: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Number of speakers; more than one enables per-speaker perturbation
    /// of the word prototypes.
    pub n_speakers: usize,
    pub speaker_std: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_words: 24,
            min_len: 3,
            max_len: 7,
            frames_per_token: 4,
            feat_dim: 16,
            frame_rate_hz: 50.0,
            noise_std: 0.3,
            codebook_size: 125,
            min_expansion: 2,
            max_expansion: 4,
            n_train: 4000,
            n_dev: 100,
            n_test: 200,
            n_speakers: 1,
            speaker_std: 0.3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_words", self.n_words),
            ("min_len", self.min_len),
            ("frames_per_token", self.frames_per_token),
            ("feat_dim", self.feat_dim),
            ("min_expansion", self.min_expansion),
            ("n_speakers", self.n_speakers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("data.{name}"), "must be positive"));
            }
        }
        if self.max_len < self.min_len {
            return Err(Error::config("data.max_len", "must be ≥ min_len"));
        }
        if self.max_expansion < self.min_expansion {
            return Err(Error::config("data.max_expansion", "must be ≥ min_expansion"));
        }
        if self.n_words % 2 != 0 {
            return Err(Error::config("data.n_words", "must be even (parity reordering rule)"));
        }
        // Each word needs its own head token plus at least one shared tail
        // token for an injective, prefix-free expansion.
        if self.n_words + usize::from(self.max_expansion > 1) > self.codebook_size {
            return Err(Error::config(
                "data.n_words",
                format!(
                    "{} words cannot be expanded injectively into a codebook of {}",
                    self.n_words, self.codebook_size
                ),
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.speaker_std >= 0.0) || !(self.frame_rate_hz > 0.0) {
            return Err(Error::config("data.noise_std", "noise levels must be ≥ 0, frame rate > 0"));
        }
        Ok(())
    }

    pub fn text_vocab(&self) -> TextVocab {
        TextVocab::new(self.n_words)
    }

    pub fn audio_vocab(&self) -> AudioVocab {
        AudioVocab::new(self.codebook_size)
    }

    pub fn split_size(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.n_train),
            "dev" => Ok(self.n_dev),
            "test" => Ok(self.n_test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Word → speech-token expansion. Entries need not be prefix-free for
/// [`ExpansionTable::invert`], which uses greedy longest match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionTable {
    pub entries: Vec<Vec<usize>>,
}

impl ExpansionTable {
    pub fn new(entries: Vec<Vec<usize>>) -> Result<Self> {
        if entries.iter().any(Vec::is_empty) {
            return Err(Error::invalid("expansion entries must be non-empty"));
        }
        let distinct: BTreeSet<&Vec<usize>> = entries.iter().collect();
        if distinct.len() != entries.len() {
            return Err(Error::invalid("expansion entries must be distinct"));
        }
        Ok(Self { entries })
    }

    pub fn expand(&self, text: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &w in text {
            let e = self
                .entries
                .get(w)
                .ok_or_else(|| Error::invalid(format!("word {w} has no expansion")))?;
            out.extend_from_slice(e);
        }
        Ok(out)
    }

    fn longest_match(&self, tokens: &[usize]) -> Option<(usize, usize)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| tokens.starts_with(e))
            .max_by_key(|(w, e)| (e.len(), std::cmp::Reverse(*w)))
            .map(|(w, e)| (w, e.len()))
    }

    /// Greedy longest-match inversion. A run of tokens that matches no entry
    /// becomes a single `unk` and decoding resumes at the next position
    /// where some entry matches.
    pub fn invert(&self, tokens: &[usize], unk: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut i = 0;
        let mut in_garbage = false;
        while i < tokens.len() {
            match self.longest_match(&tokens[i..]) {
                Some((w, len)) => {
                    out.push(w);
                    i += len;
                    in_garbage = false;
                }
                None => {
                    if !in_garbage {
                        out.push(unk);
                        in_garbage = true;
                    }
                    i += 1;
                }
            }
        }
        out
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub src_tokens: Vec<usize>,
    pub feat_file: String,
    pub tgt_text: Vec<usize>,
    pub tgt_speech: Vec<usize>,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub split: String,
    pub config_hash: Option<String>,
    pub records: Vec<ManifestRecord>,
}

/// Everything needed to regenerate or interpret a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: GenConfig,
    pub seed: u64,
    pub config_hash: String,
    pub word_map: Vec<usize>,
    pub table: ExpansionTable,
    pub prototypes: Vec<Vec<f64>>,
    pub speaker_offsets: Vec<Vec<f64>>,
}

/// SHA-256 over the canonical JSON of `(config, seed)`.
pub fn config_hash(config: &GenConfig, seed: u64) -> Result<String> {
    let json = serde_json::to_string(&(config, seed))?;
    Ok(hex(&Sha256::digest(json.as_bytes())))
}

/// Builds the corpus tables for `(config, seed)`. Deterministic.
pub fn gen_corpus(config: &GenConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let root = Rng::new(seed);
    let mut rng = root.split_str("word-map");
    let mut word_map: Vec<usize> = (0..config.n_words).collect();
    rng.shuffle(&mut word_map);

    let mut rng = root.split_str("expansion");
    let mut ids: Vec<usize> = (0..config.codebook_size).collect();
    rng.shuffle(&mut ids);
    let (heads, tails) = ids.split_at(config.n_words);
    let entries = heads
        .iter()
        .map(|&h| {
            let len = rng.range_inclusive(config.min_expansion, config.max_expansion);
            let mut e = vec![h];
            e.extend((1..len).map(|_| tails[rng.below(tails.len())]));
            e
        })
        .collect();

    let mut rng = root.split_str("prototypes");
    let prototypes = (0..config.n_words)
        .map(|_| (0..config.feat_dim).map(|_| rng.normal()).collect())
        .collect();
    let mut rng = root.split_str("speakers");
    let speaker_offsets = (0..config.n_speakers)
        .map(|s| {
            (0..config.feat_dim)
                .map(|_| if s == 0 { 0.0 } else { config.speaker_std * rng.normal() })
                .collect()
        })
        .collect();

    Ok(Corpus {
        config: config.clone(),
        seed,
        config_hash: config_hash(config, seed)?,
        word_map,
        table: ExpansionTable::new(entries)?,
        prototypes,
        speaker_offsets,
    })
}

/// An utterance with its features in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub record: ManifestRecord,
    pub features: Tensor,
}

impl Corpus {
    pub fn text_vocab(&self) -> TextVocab {
        self.config.text_vocab()
    }

    pub fn audio_vocab(&self) -> AudioVocab {
        self.config.audio_vocab()
    }

    /// Target text for a source word sequence.
    pub fn translate(&self, src: &[usize]) -> Result<Vec<usize>> {
        let mut y = src
            .iter()
            .map(|&w| {
                self.word_map
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("source word {w} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        for i in (0..y.len().saturating_sub(1)).step_by(2) {
            if y[i] % 2 == 1 {
                y.swap(i, i + 1);
            }
        }
        Ok(y)
    }

    pub fn expand(&self, text: &[usize]) -> Result<Vec<usize>> {
        self.table.expand(text)
    }

    pub fn transcribe(&self, speech: &[usize]) -> Vec<usize> {
        self.table.invert(speech, self.text_vocab().unk())
    }

    pub fn features(&self, src: &[usize], speaker: usize, rng: &mut Rng) -> Result<Tensor> {
        let (f, k) = (self.config.feat_dim, self.config.frames_per_token);
        let offset = self
            .speaker_offsets
            .get(speaker)
            .ok_or_else(|| Error::invalid(format!("speaker {speaker} out of range")))?;
        let mut data = Vec::with_capacity(src.len() * k * f);
        for &w in src {
            let proto = &self.prototypes[w];
            for _ in 0..k {
                for j in 0..f {
                    data.push(proto[j] + offset[j] + self.config.noise_std * rng.normal());
                }
            }
        }
        Tensor::new(vec![src.len() * k, f], data)
    }

    /// Recovers source words from features by nearest prototype over each
    /// word's frame block (exact when noise is small relative to the
    /// prototype spacing).
    pub fn recognize_source(&self, features: &Tensor, speaker: usize) -> Vec<usize> {
        let (f, k) = (self.config.feat_dim, self.config.frames_per_token);
        let offset = &self.speaker_offsets[speaker.min(self.speaker_offsets.len() - 1)];
        (0..features.rows() / k)
            .map(|b| {
                let mut mean = vec![0.0; f];
                for r in b * k..(b + 1) * k {
                    for (m, v) in mean.iter_mut().zip(features.row(r)) {
                        *m += v / k as f64;
                    }
                }
                let dist = |p: &Vec<f64>| -> f64 {
                    p.iter().zip(&mean).zip(offset).map(|((p, m), o)| (p + o - m).powi(2)).sum()
                };
                (0..self.prototypes.len())
                    .min_by(|&a, &b| dist(&self.prototypes[a]).total_cmp(&dist(&self.prototypes[b])))
                    .unwrap_or(0)
            })
            .collect()
    }

    pub fn utterance(&self, split: &str, index: usize) -> Result<Utterance> {
        let mut rng = Rng::new(self.seed).split_str(split).split(index as u64);
        let len = rng.range_inclusive(self.config.min_len, self.config.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.below(self.config.n_words)).collect();
        let speaker = rng.below(self.config.n_speakers);
        let features = self.features(&src, speaker, &mut rng)?;
        let tgt_text = self.translate(&src)?;
        let tgt_speech = self.expand(&tgt_text)?;
        Ok(Utterance {
            record: ManifestRecord {
                id: format!("{split}-{index:05}"),
                src_tokens: src,
                feat_file: format!("features/{split}"),
                tgt_text,
                tgt_speech,
                speaker,
            },
            features,
        })
    }

    pub fn split(&self, split: &str) -> Result<Vec<Utterance>> {
        (0..self.config.split_size(split)?)
            .map(|i| self.utterance(split, i))
            .collect()
    }

    /// Writes `corpus.json`, one `{split}.jsonl` manifest per split and one
    /// feature container per split under `features/`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = dir.join(CORPUS_FILE);
        fs::write(&meta, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&meta, e))?;
        for split in SPLITS {
            let utts = self.split(split)?;
            let mut store = ParamStore::new();
            for u in &utts {
                store.insert(u.record.id.clone(), u.features.clone());
            }
            Checkpoint::new(kind::FEATURES, store).save(dir.join("features").join(split))?;
            let records: Vec<ManifestRecord> = utts.into_iter().map(|u| u.record).collect();
            write_manifest(dir.join(format!("{split}.jsonl")), &records)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(CORPUS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let corpus: Corpus = serde_json::from_str(&text)?;
        if config_hash(&corpus.config, corpus.seed)? != corpus.config_hash {
            return Err(Error::invalid(format!(
                "{}: config hash does not match its config and seed",
                path.display()
            )));
        }
        Ok(corpus)
    }
}

pub fn write_manifest<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines file, reporting the 1-based line of any malformed
/// record. Blank lines are skipped.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads and validates a manifest: ids must be unique and every feature
/// container it references must exist next to it.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let records: Vec<ManifestRecord> = read_jsonl(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    let mut checked = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate id `{}`", r.id),
            });
        }
        if checked.insert(r.feat_file.as_str()) {
            let feat = root.join(&r.feat_file).join(crate::container::META_FILE);
            if !feat.is_file() {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("missing feature file `{}`", r.feat_file),
                });
            }
        }
    }
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let config_hash = Corpus::load(root).ok().map(|c| c.config_hash);
    Ok(Manifest {
        path: path.to_path_buf(),
        split,
        config_hash,
        records,
    })
}

impl Manifest {
    pub fn root(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// Loads the features of every record, in manifest order.
    pub fn load_utterances(&self) -> Result<Vec<Utterance>> {
        let mut containers: BTreeMap<&str, Checkpoint> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if !containers.contains_key(r.feat_file.as_str()) {
                let c = Checkpoint::load(self.root().join(&r.feat_file), Some(kind::FEATURES))?;
                containers.insert(&r.feat_file, c);
            }
            let features = containers[r.feat_file.as_str()]
                .params
                .get(&r.id)
                .map_err(|_| Error::invalid(format!("no features for `{}` in {}", r.id, r.feat_file)))?
                .clone();
            out.push(Utterance {
                record: r.clone(),
                features,
            });
        }
        Ok(out)
    }
}

/// A padded minibatch. Each stream gets its EOS appended and is then padded
/// to the longest item.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub text: Vec<Vec<usize>>,
    pub speech: Vec<Vec<usize>>,
    pub text_lens: Vec<usize>,
    pub speech_lens: Vec<usize>,
}

pub fn make_batches(
    records: &[ManifestRecord],
    batch_size: usize,
    seed: u64,
    text_vocab: TextVocab,
    audio_vocab: AudioVocab,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::new(seed).split_str("batches").shuffle(&mut order);
    let pad = |seqs: Vec<Vec<usize>>, fill: usize| -> (Vec<Vec<usize>>, Vec<usize>) {
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let max = lens.iter().copied().max().unwrap_or(0);
        let padded = seqs
            .into_iter()
            .map(|mut s| {
                s.resize(max, fill);
                s
            })
            .collect();
        (padded, lens)
    };
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let text = idx
                .iter()
                .map(|&i| [records[i].tgt_text.as_slice(), &[text_vocab.eos()]].concat())
                .collect();
            let speech = idx
                .iter()
                .map(|&i| [records[i].tgt_speech.as_slice(), &[audio_vocab.eos()]].concat())
                .collect();
            let (text, text_lens) = pad(text, text_vocab.pad());
            let (speech, speech_lens) = pad(speech, audio_vocab.pad());
            Batch {
                indices: idx.to_vec(),
                text,
                speech,
                text_lens,
                speech_lens,
            }
        })
        .collect())
}
