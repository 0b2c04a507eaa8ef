//! Fixtures shared by the benchmarks under `benches/`.

use qatip::corpus::{Batch, LengthCaps, RawRecord, TokenizeMode, Triplet, Vocabulary};
use qatip::rng::Lcg64;

/// `n` random records over a `words`-token vocabulary with the given review length.
pub fn synthetic(n: usize, words: usize, review_len: usize, seed: u64) -> (Vocabulary, Vec<Triplet>) {
    let mut rng = Lcg64::new(seed);
    let text = |len: usize, rng: &mut Lcg64| {
        (0..len).map(|_| format!("w{}", rng.below(words))).collect::<Vec<_>>().join(" ")
    };
    let records: Vec<RawRecord> = (0..n)
        .map(|_| RawRecord {
            id: None,
            review: text(review_len, &mut rng),
            query: text(4, &mut rng),
            tip: Some(text(8, &mut rng)),
        })
        .collect();
    let vocab = qatip::corpus::build_vocab(&records, TokenizeMode::Whitespace, 1, words + 4).unwrap();
    let triplets = records
        .iter()
        .map(|r| Triplet::encode(r, &vocab, TokenizeMode::Whitespace, LengthCaps::default()))
        .collect();
    (vocab, triplets)
}

pub fn batch_of(triplets: &[Triplet]) -> Batch {
    Batch::from_triplets(triplets, (0..triplets.len()).collect())
}
