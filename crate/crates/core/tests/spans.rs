mod common;

use common::{brute_force, random_record};
use obliviate::harvest::split_spans;
use obliviate::scene::CooccurrenceSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn splitter_matches_brute_force_on_random_captions() {
    let spec = CooccurrenceSpec::default_biased();
    let vocab = spec.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut with_spans = 0;
    for id in 0..1000 {
        let rec = random_record(id, &spec, &vocab, &mut rng);
        let got = split_spans(&rec, &vocab);
        assert_eq!(got, brute_force(&rec, &vocab), "caption {id}: {:?}", vocab.decode(&rec.prediction));
        assert_eq!(got.len(), rec.hallucinated.len());
        with_spans += !got.is_empty() as usize;
    }
    assert!(with_spans > 300, "only {with_spans} captions had spans");
}
