//! Corpus BLEU, WER, the oracle transcriber and report generation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, Corpus, ExpansionTable, ManifestRecord};
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

fn ngram_counts<T: std::hash::Hash + Eq + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and totals for orders 1..=4, plus hypothesis and
/// reference lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of<T: std::hash::Hash + Eq + Clone>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = Self {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        s
    }

    pub fn add(&mut self, other: &Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// `100 · BP · exp(mean log p_n)`; zero if any precision is zero.
    pub fn score(&self) -> f64 {
        if self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_mean = (0..MAX_ORDER)
            .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        100.0 * bp * log_mean.exp()
    }
}

/// Corpus-level BLEU over paired token sequences (orders 1–4, no smoothing).
pub fn bleu<T: std::hash::Hash + Eq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "bleu: {} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() || refs.iter().any(Vec::is_empty) {
        return Err(Error::invalid("bleu: empty reference"));
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::of(h, r));
    }
    Ok(total.score())
}

/// Sentence-level BLEU (same definition on a single pair).
pub fn sentence_bleu<T: std::hash::Hash + Eq + Clone>(hyp: &[T], reference: &[T]) -> Result<f64> {
    bleu(&[hyp.to_vec()], &[reference.to_vec()])
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: edit distance over reference length.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("wer: empty reference"));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Text normalization: lowercase, drop punctuation and symbols, collapse
/// whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Token-id normalization is the identity: synthetic ids carry no case or
/// punctuation.
pub fn normalize_tokens(tokens: &[usize]) -> Vec<usize> {
    tokens.to_vec()
}

/// Inverts the expansion table with greedy longest match; unmatched runs
/// become one `unk` each.
pub fn oracle_transcribe(table: &ExpansionTable, speech: &[usize], unk: usize) -> Vec<usize> {
    table.invert(speech, unk)
}

/// One line of a predictions manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub text: Vec<usize>,
    pub speech: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub bleu_sent: f64,
    pub wer: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub asr_bleu: f64,
    pub align_wer: f64,
    pub n_utterances: usize,
    pub truncated: usize,
    pub utterances: Vec<UtteranceScore>,
}

/// Scores predictions against references. `bleu` compares predicted text
/// with the reference text; `asr_bleu` compares the transcript of the
/// predicted speech with the reference text; `align_wer` is the mean WER of
/// the speech transcript against the model's own text (0 when both are
/// empty, 1 when only the text is empty). Per-utterance `wer` in the report
/// is that alignment WER; `bleu_sent` is the sentence BLEU of the text.
pub fn evaluate(
    predictions: &[Prediction],
    references: &[ManifestRecord],
    table: &ExpansionTable,
    unk: usize,
) -> Result<EvalReport> {
    if references.is_empty() {
        return Err(Error::invalid("evaluate: no reference utterances"));
    }
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let missing: Vec<&str> = references
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let ref_ids: std::collections::BTreeSet<&str> = references.iter().map(|r| r.id.as_str()).collect();
    let extra: Vec<&str> = by_id.keys().copied().filter(|id| !ref_ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::invalid(format!(
            "evaluate: id mismatch; missing predictions for [{}]; unexpected predictions [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let (mut text_stats, mut asr_stats) = (BleuStats::default(), BleuStats::default());
    let mut rows = Vec::with_capacity(references.len());
    let mut wer_sum = 0.0;
    for r in references {
        let p = by_id[r.id.as_str()];
        let heard = normalize_tokens(&oracle_transcribe(table, &p.speech, unk));
        let reference = normalize_tokens(&r.tgt_text);
        let text = BleuStats::of(&p.text, &reference);
        text_stats.add(&text);
        asr_stats.add(&BleuStats::of(&heard, &reference));
        let w = if p.text.is_empty() {
            if heard.is_empty() {
                0.0
            } else {
                1.0
            }
        } else {
            wer(&heard, &p.text)?
        };
        wer_sum += w;
        rows.push(UtteranceScore {
            id: r.id.clone(),
            bleu_sent: text.score(),
            wer: w,
            truncated: p.truncated,
        });
    }
    Ok(EvalReport {
        bleu: text_stats.score(),
        asr_bleu: asr_stats.score(),
        align_wer: wer_sum / references.len() as f64,
        n_utterances: references.len(),
        truncated: rows.iter().filter(|r| r.truncated).count(),
        utterances: rows,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,bleu_sent,wer,truncated\n");
        for r in &self.utterances {
            out.push_str(&format!("{},{},{},{}\n", r.id, r.bleu_sent, r.wer, r.truncated));
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Evaluates a predictions manifest against a reference manifest whose
/// directory holds the corpus tables.
pub fn evaluate_files(pred: impl AsRef<Path>, reference: impl AsRef<Path>) -> Result<EvalReport> {
    let predictions: Vec<Prediction> = read_jsonl(pred)?;
    let reference = reference.as_ref();
    let records: Vec<ManifestRecord> = read_jsonl(reference)?;
    let corpus = Corpus::load(reference.parent().unwrap_or(Path::new(".")))?;
    evaluate(&predictions, &records, &corpus.table, corpus.text_vocab().unk())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_fixtures() {
        let r = words("a b c d");
        assert_eq!(bleu(&[r.clone()], &[r.clone()]).unwrap(), 100.0);
        let h = words("a b c d e");
        let expect = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu(&[h], &[r.clone()]).unwrap() - expect).abs() < 1e-9);
        assert_eq!(bleu(&[words("a b c x")], &[r.clone()]).unwrap(), 0.0);
        assert!(bleu(&[r.clone()], &[]).is_err());
        assert!(bleu(&[r.clone()], &[vec![]]).is_err());
    }

    #[test]
    fn brevity_penalty() {
        let r = words("a b c d e f");
        let h = words("a b c d");
        let expect = 100.0 * (1.0f64 - 6.0 / 4.0).exp();
        assert!((bleu(&[h], &[r]).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn wer_fixtures() {
        assert_eq!(wer(&words("a b c"), &words("a b c")).unwrap(), 0.0);
        assert_eq!(wer(&words("a x c"), &words("a b c")).unwrap(), 1.0 / 3.0);
        assert_eq!(wer(&words("a"), &words("a b")).unwrap(), 0.5);
        assert!(wer(&words("a"), &[]).is_err());
    }

    #[test]
    fn normalizer() {
        assert_eq!(normalize("Hello,  world!"), "hello world");
        for s in ["Hello,  world!", " A--b ", "ÉTÉ; x"] {
            assert_eq!(normalize(&normalize(s)), normalize(s));
        }
        assert_eq!(normalize_tokens(&[3, 1]), vec![3, 1]);
    }

    fn table() -> ExpansionTable {
        ExpansionTable::new(vec![vec![10, 1], vec![11, 2], vec![12, 3, 3], vec![13]]).unwrap()
    }

    fn record(id: &str, text: &[usize]) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            src_tokens: text.to_vec(),
            feat_file: "features/test".into(),
            tgt_text: text.to_vec(),
            tgt_speech: table().expand(text).unwrap(),
            speaker: 0,
        }
    }

    #[test]
    fn perfect_system() {
        let refs = vec![record("u1", &[0, 1, 2, 3]), record("u2", &[3, 2, 1, 0, 0])];
        let preds: Vec<Prediction> = refs
            .iter()
            .map(|r| Prediction {
                id: r.id.clone(),
                text: r.tgt_text.clone(),
                speech: r.tgt_speech.clone(),
                truncated: false,
            })
            .collect();
        let rep = evaluate(&preds, &refs, &table(), 99).unwrap();
        assert_eq!((rep.bleu, rep.asr_bleu, rep.align_wer), (100.0, 100.0, 0.0));
    }

    #[test]
    fn id_mismatch_lists_missing() {
        let refs = vec![record("u1", &[0, 1, 2, 3]), record("u2", &[3, 2, 1, 0])];
        let preds = vec![Prediction {
            id: "u1".into(),
            text: vec![0],
            speech: vec![],
            truncated: false,
        }];
        let err = evaluate(&preds, &refs, &table(), 99).unwrap_err().to_string();
        assert!(err.contains("u2"), "{err}");
    }
}
