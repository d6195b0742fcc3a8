use crate::error::{Error, Result};
use crate::vocab::{AudioVocab, TextVocab};

/// Two aligned target streams of equal length `S`.
///
/// With text `t` (ending in EOS_t) and audio `a` (ending in EOS_a):
/// `S = max(|t|, |a| + D)`, `text[s] = t[s]` for `s < |t|` and PAD_t after,
/// `audio[s] = a[s − D]` for `D ≤ s < D + |a|` and PAD_a elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointSequence {
    pub text: Vec<usize>,
    pub audio: Vec<usize>,
    pub delay: usize,
}

impl JointSequence {
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    /// Teacher-forced inputs: each stream shifted right by one behind its BOS.
    pub fn inputs(&self, tv: TextVocab, av: AudioVocab) -> (Vec<usize>, Vec<usize>) {
        let s = self.len();
        let text = std::iter::once(tv.bos()).chain(self.text[..s - 1].iter().copied()).collect();
        let audio = std::iter::once(av.bos()).chain(self.audio[..s - 1].iter().copied()).collect();
        (text, audio)
    }
}

fn check_stream(name: &str, tokens: &[usize], is_content: impl Fn(usize) -> bool, eos: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid(format!("{name} stream is empty")));
    }
    let (last, body) = tokens.split_last().expect("non-empty");
    if *last != eos {
        return Err(Error::invalid(format!("{name} stream must end with EOS")));
    }
    if let Some(bad) = body.iter().find(|&&t| !is_content(t)) {
        return Err(Error::invalid(format!(
            "{name} stream contains special or out-of-range token {bad} before EOS"
        )));
    }
    Ok(())
}

pub fn build_joint_sequence(
    text: &[usize],
    audio: &[usize],
    delay: usize,
    tv: TextVocab,
    av: AudioVocab,
) -> Result<JointSequence> {
    check_stream("text", text, |t| tv.is_content(t), tv.eos())?;
    check_stream("audio", audio, |t| av.is_content(t), av.eos())?;
    let s = text.len().max(audio.len() + delay);
    let text_row = (0..s).map(|i| text.get(i).copied().unwrap_or(tv.pad())).collect();
    let audio_row = (0..s)
        .map(|i| {
            if i >= delay && i < delay + audio.len() {
                audio[i - delay]
            } else {
                av.pad()
            }
        })
        .collect();
    Ok(JointSequence {
        text: text_row,
        audio: audio_row,
        delay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let (tv, av) = (TextVocab::new(10), AudioVocab::new(20));
        let (t1, t2) = (1, 2);
        let seq = build_joint_sequence(&[t1, t2, tv.eos()], &[5, 6, 7, 8, av.eos()], 2, tv, av).unwrap();
        assert_eq!(seq.len(), 7);
        let p = tv.pad();
        assert_eq!(seq.text, vec![t1, t2, tv.eos(), p, p, p, p]);
        let q = av.pad();
        assert_eq!(seq.audio, vec![q, q, 5, 6, 7, 8, av.eos()]);
        let (ti, ai) = seq.inputs(tv, av);
        assert_eq!(ti[0], tv.bos());
        assert_eq!(ai, vec![av.bos(), q, q, 5, 6, 7, 8]);
    }

    #[test]
    fn zero_delay_aligns() {
        let (tv, av) = (TextVocab::new(10), AudioVocab::new(20));
        let seq = build_joint_sequence(&[3, tv.eos()], &[4, av.eos()], 0, tv, av).unwrap();
        assert_eq!(seq.text, vec![3, tv.eos()]);
        assert_eq!(seq.audio, vec![4, av.eos()]);
    }

    #[test]
    fn rejects_malformed_streams() {
        let (tv, av) = (TextVocab::new(10), AudioVocab::new(20));
        assert!(build_joint_sequence(&[1, tv.eos()], &[], 1, tv, av).is_err());
        assert!(build_joint_sequence(&[1], &[2, av.eos()], 1, tv, av).is_err());
        assert!(build_joint_sequence(&[tv.pad(), tv.eos()], &[2, av.eos()], 1, tv, av).is_err());
        assert!(build_joint_sequence(&[1, tv.eos()], &[av.bos(), av.eos()], 1, tv, av).is_err());
        assert!(build_joint_sequence(&[1, tv.eos()], &[av.eos(), av.eos()], 1, tv, av).is_err());
    }
}
