use duospeech::duolm::build_joint_sequence;
use duospeech::vocab::{AudioVocab, TextVocab};
use proptest::prelude::*;

const WORDS: usize = 12;
const CODEBOOK: usize = 30;

fn streams() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize)> {
    (
        prop::collection::vec(0..WORDS, 0..50),
        prop::collection::vec(0..CODEBOOK, 0..50),
        0usize..=5,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn alignment_follows_the_delay_rule((mut text, mut audio, delay) in streams()) {
        let (tv, av) = (TextVocab::new(WORDS), AudioVocab::new(CODEBOOK));
        text.push(tv.eos());
        audio.push(av.eos());
        let seq = build_joint_sequence(&text, &audio, delay, tv, av).unwrap();

        let len = text.len().max(audio.len() + delay);
        prop_assert_eq!(seq.len(), len);
        prop_assert_eq!(seq.text.len(), seq.audio.len());
        for s in 0..len {
            let want_text = text.get(s).copied().unwrap_or(tv.pad());
            prop_assert_eq!(seq.text[s], want_text);
            let want_audio = s.checked_sub(delay).and_then(|i| audio.get(i).copied()).unwrap_or(av.pad());
            prop_assert_eq!(seq.audio[s], want_audio);
        }
        prop_assert_eq!(seq.text.iter().filter(|&&t| t == tv.eos()).count(), 1);
        prop_assert_eq!(seq.audio.iter().filter(|&&a| a == av.eos()).count(), 1);
    }

    #[test]
    fn teacher_forced_inputs_shift_right((mut text, mut audio, delay) in streams()) {
        let (tv, av) = (TextVocab::new(WORDS), AudioVocab::new(CODEBOOK));
        text.push(tv.eos());
        audio.push(av.eos());
        let seq = build_joint_sequence(&text, &audio, delay, tv, av).unwrap();
        let (ti, ai) = seq.inputs(tv, av);
        prop_assert_eq!(ti[0], tv.bos());
        prop_assert_eq!(ai[0], av.bos());
        prop_assert_eq!(&ti[1..], &seq.text[..seq.len() - 1]);
        prop_assert_eq!(&ai[1..], &seq.audio[..seq.len() - 1]);
    }
}
