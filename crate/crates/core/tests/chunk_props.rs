use duospeech::flowdec::{chunk_tokens, concat_chunks, FlowConfig, FlowDecoder, SpeakerPrompt};
use duospeech::numerics::{ParamStore, Rng};
use proptest::prelude::*;

fn small_flow() -> (FlowDecoder, ParamStore) {
    let flow = FlowDecoder::new(FlowConfig {
        chunk_size: 4,
        hidden: 16,
        codebook_size: 20,
        ode_steps: 3,
        ..Default::default()
    })
    .unwrap();
    let mut store = ParamStore::new();
    flow.init(&mut store, &mut Rng::new(11));
    (flow, store)
}

proptest! {
    #[test]
    fn chunks_concatenate_back(tokens in prop::collection::vec(0usize..125, 1..200), size in 1usize..16) {
        let chunks = chunk_tokens(&tokens, size).unwrap();
        prop_assert_eq!(chunks.len(), tokens.len().div_ceil(size));
        prop_assert!(chunks.iter().all(|c| !c.is_empty() && c.len() <= size));
        prop_assert!(chunks[..chunks.len() - 1].iter().all(|c| c.len() == size));
        prop_assert_eq!(chunks.concat(), tokens);
    }

    #[test]
    fn later_tokens_never_change_earlier_chunks(
        tokens in prop::collection::vec(0usize..20, 5..20),
        edit in any::<prop::sample::Index>(),
        replacement in 0usize..20,
    ) {
        let (flow, store) = small_flow();
        let speaker = SpeakerPrompt::from_id(0, flow.config.cond_dim, 3);
        let at = edit.index(tokens.len());
        let mut edited = tokens.clone();
        edited[at] = replacement;
        let a = flow.decode_offline(&store, &tokens, &speaker, 9).unwrap();
        let b = flow.decode_offline(&store, &edited, &speaker, 9).unwrap();
        let first_touched = at / flow.config.chunk_size;
        prop_assert_eq!(&a[..first_touched], &b[..first_touched]);
        prop_assert_eq!(
            concat_chunks(&a).unwrap().rows(),
            tokens.len() * flow.config.frames_per_token
        );
    }
}
