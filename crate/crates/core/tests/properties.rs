use std::sync::OnceLock;

use lexrecycle::corpus::toy::toy_documents;
use lexrecycle::corpus::{split_sentences, Corpus};
use lexrecycle::tokenizer::{train_bpe, Vocabulary};
use proptest::prelude::*;

fn trained() -> &'static (Vocabulary, Vocabulary) {
    static V: OnceLock<(Vocabulary, Vocabulary)> = OnceLock::new();
    V.get_or_init(|| {
        let docs = toy_documents(1, 4000);
        (train_bpe(&docs, 300).unwrap(), train_bpe(&docs, 420).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..=512)) {
        let (v, _) = trained();
        let ids = v.encode(&bytes);
        prop_assert_eq!(v.decode(&ids).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn more_merges_never_lengthen_an_encoding(text in "[a-z ,.!]{0,200}") {
        let (small, large) = trained();
        prop_assert!(large.encode(text.as_bytes()).len() <= small.encode(text.as_bytes()).len());
    }

    #[test]
    fn english_like_text_round_trips(seed in 0u64..1000) {
        let (_, v) = trained();
        let doc = toy_documents(seed, 60).join("\n\n");
        prop_assert_eq!(v.decode(&v.encode(doc.as_bytes())).unwrap(), doc.into_bytes());
    }

    #[test]
    fn dedup_is_idempotent(picks in proptest::collection::vec((0usize..6, 0usize..6), 1..12)) {
        let sentences = ["The cat sat.", "A dog ran!", "Who is there?", "Rain fell.", "The cat sat.", "Birds sing."];
        let docs: Vec<String> = picks.iter().map(|&(a, b)| format!("{} {}\n{}", sentences[a], sentences[b], sentences[(a + b) % 6])).collect();
        let once = Corpus::from_texts("mem", &docs).dedup();
        let twice = once.dedup();
        prop_assert_eq!(once.texts().collect::<Vec<_>>(), twice.texts().collect::<Vec<_>>());
        let mut seen = std::collections::HashSet::new();
        for t in once.texts() {
            for (s, _) in split_sentences(t) {
                prop_assert!(seen.insert(s.to_string()), "sentence {:?} kept twice", s);
            }
        }
    }
}

#[test]
fn the_larger_vocabulary_extends_the_smaller_one() {
    let (small, large) = trained();
    assert_eq!(&large.merges()[..small.merges().len()], small.merges());
    for id in 0..256u32 {
        assert_eq!(large.token_bytes(id), Some(&[id as u8][..]));
    }
}

#[test]
fn training_is_deterministic() {
    let docs = toy_documents(1, 4000);
    assert_eq!(train_bpe(&docs, 300).unwrap().to_text(), trained().0.to_text());
}
