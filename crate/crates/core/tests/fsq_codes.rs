use duospeech::fsq::FsqConfig;
use proptest::prelude::*;

fn levels() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(prop::sample::select(vec![3usize, 5, 7, 9]), 1..=4)
}

#[test]
fn saturated_latent_worked_example() {
    let fsq = FsqConfig::new(vec![3, 3]).unwrap();
    let q = fsq.quantize(&[10.0, -10.0]).unwrap();
    assert_eq!(q.code, vec![1, -1]);
    assert_eq!(q.id, 6);
}

proptest! {
    #[test]
    fn ids_and_codes_are_a_bijection(levels in levels()) {
        let fsq = FsqConfig::new(levels.clone()).unwrap();
        prop_assert_eq!(fsq.codebook_size(), levels.iter().product::<usize>());
        for id in 0..fsq.codebook_size() {
            let code = fsq.token_to_code(id).unwrap();
            for (c, &l) in code.iter().zip(&levels) {
                prop_assert!(c.unsigned_abs() as usize <= l / 2);
            }
            prop_assert_eq!(fsq.id_of(&code).unwrap(), id);
            prop_assert_eq!(fsq.quantize(&fsq.center_latent(&code)).unwrap().id, id);
        }
        prop_assert!(fsq.token_to_code(fsq.codebook_size()).is_err());
    }

    #[test]
    fn any_latent_lands_on_a_valid_code(
        levels in levels(),
        z in prop::collection::vec(-50.0f64..50.0, 4),
    ) {
        let fsq = FsqConfig::new(levels.clone()).unwrap();
        let q = fsq.quantize(&z[..levels.len()]).unwrap();
        prop_assert!(q.id < fsq.codebook_size());
        prop_assert_eq!(fsq.token_to_code(q.id).unwrap(), q.code.clone());
        // Quantizing is idempotent through the code's center.
        prop_assert_eq!(fsq.quantize(&fsq.center_latent(&q.code)).unwrap(), q);
    }
}
