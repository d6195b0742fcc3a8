use duospeech::data::{gen_corpus, GenConfig};
use duospeech::evalkit::{bleu, normalize, wer};
use proptest::prelude::*;

fn pairs() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    prop::collection::vec(
        (prop::collection::vec(0u8..6, 0..10), prop::collection::vec(0u8..6, 1..10)),
        1..8,
    )
}

proptest! {
    #[test]
    fn corpus_bleu_ignores_utterance_order(pairs in pairs(), seed in any::<u64>()) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut shuffled = pairs.clone();
        let mut rng = duospeech::numerics::Rng::new(seed);
        rng.shuffle(&mut shuffled);
        let (hs, rs): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        let score = bleu(&h, &r).unwrap();
        prop_assert!((0.0..=100.0).contains(&score));
        prop_assert_eq!(score, bleu(&hs, &rs).unwrap());
    }

    #[test]
    fn identical_text_scores_perfectly(pairs in pairs()) {
        let refs: Vec<Vec<u8>> = pairs.into_iter().map(|(_, r)| r).collect();
        if refs.iter().map(Vec::len).sum::<usize>() >= 4 * refs.len() {
            prop_assert_eq!(bleu(&refs, &refs).unwrap(), 100.0);
        }
        for r in &refs {
            prop_assert_eq!(wer(r, r).unwrap(), 0.0);
        }
    }

    #[test]
    fn wer_is_a_normalized_edit_distance(h in prop::collection::vec(0u8..4, 0..12), r in prop::collection::vec(0u8..4, 1..12)) {
        let w = wer(&h, &r).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert!(w * r.len() as f64 <= h.len().max(r.len()) as f64 + 1e-12);
    }

    #[test]
    fn normalizer_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once.clone());
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
    }

    #[test]
    fn transcription_inverts_expansion(text in prop::collection::vec(0usize..24, 1..30)) {
        let corpus = gen_corpus(&GenConfig::default(), 5).unwrap();
        prop_assert_eq!(corpus.transcribe(&corpus.expand(&text).unwrap()), text);
    }

    #[test]
    fn a_corrupted_word_becomes_one_unk(
        text in prop::collection::vec(0usize..24, 1..12),
        which in any::<prop::sample::Index>(),
        junk in any::<prop::sample::Index>(),
    ) {
        let corpus = gen_corpus(&GenConfig::default(), 5).unwrap();
        let heads: Vec<usize> = corpus.table.entries.iter().map(|e| e[0]).collect();
        let non_heads: Vec<usize> = (0..corpus.config.codebook_size).filter(|t| !heads.contains(t)).collect();

        let k = which.index(text.len());
        let start: usize = text[..k].iter().map(|&w| corpus.table.entries[w].len()).sum();
        let mut speech = corpus.expand(&text).unwrap();
        speech[start] = non_heads[junk.index(non_heads.len())];

        let mut expected = text.clone();
        expected[k] = corpus.text_vocab().unk();
        prop_assert_eq!(corpus.transcribe(&speech), expected);
    }
}
