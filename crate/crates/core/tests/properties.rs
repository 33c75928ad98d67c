use proptest::prelude::*;

use mbc::adaptation::{normalize_answer, token_f1};
use mbc::corpus::{split_words, Vocabulary};
use mbc::membank::{load_bank, save_bank, CompressedMemoryBank, FootprintReport};
use mbc::num::Tensor;

proptest! {
    // normalization is idempotent
    #[test]
    fn normalize_idempotent(s in ".{0,60}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }

    // and case-insensitive (ASCII only: Unicode case mapping does not
    // round-trip through precomposed forms)
    #[test]
    fn normalize_case_insensitive(s in "[ -~]{0,60}") {
        prop_assert_eq!(
            normalize_answer(&s.to_uppercase()),
            normalize_answer(&s)
        );
    }

    // F1 is symmetric, bounded, and 1 on identity
    #[test]
    fn f1_symmetric_and_bounded(a in "[a-z ]{0,30}", b in "[a-z ]{0,30}") {
        let ab = token_f1(&a, &b);
        prop_assert_eq!(ab, token_f1(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(token_f1(&a, &a), 1.0);
    }

    // encode/decode round-trips lowercase word text through the vocabulary
    #[test]
    fn tokenizer_round_trip(words in proptest::collection::vec("[a-z]{1,8}", 1..12)) {
        let text = words.join(" ");
        let vocab = Vocabulary::build(std::iter::once(text.as_str()));
        let ids = vocab.encode(&text);
        prop_assert_eq!(vocab.decode(&ids), text);
    }

    // splitting is stable under repeated joining
    #[test]
    fn split_words_stable(s in "[a-zA-Z0-9 .,!?]{0,60}") {
        let first = split_words(&s);
        let rejoined = first.join(" ");
        prop_assert_eq!(split_words(&rejoined), first);
    }

    // bank files round-trip exactly
    #[test]
    fn bank_round_trip(
        n_codes in 2usize..10,
        dim in 1usize..6,
        tokens in 1usize..5,
        docs in 0usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = mbc::num::ModelRng::new(seed);
        let entries = rng.uniform_tensor(n_codes, dim, -1.0, 1.0);
        let mut bank = CompressedMemoryBank::new(entries, tokens).unwrap();
        for i in 0..docs {
            let codes: Vec<u32> =
                (0..tokens).map(|_| rng.below(n_codes) as u32).collect();
            bank.insert(&format!("doc{i}"), codes).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.mbcb");
        save_bank(&bank, &path).unwrap();
        let loaded = load_bank(&path).unwrap();
        prop_assert_eq!(loaded.len(), bank.len());
        for (a, b) in loaded.docs().iter().zip(bank.docs()) {
            prop_assert_eq!(&a.doc_id, &b.doc_id);
            prop_assert_eq!(&a.codes, &b.codes);
        }
        let la: Tensor = loaded.materialize("doc0").unwrap_or_else(|_| Tensor::zeros(1, 1));
        let lb: Tensor = bank.materialize("doc0").unwrap_or_else(|_| Tensor::zeros(1, 1));
        prop_assert_eq!(la.data(), lb.data());
    }

    // footprints grow monotonically in docs and the compressed side wins
    // once enough documents amortize the codebook
    #[test]
    fn footprint_monotone(docs in 1usize..2000) {
        let small = FootprintReport::new(512, 768, 12, docs);
        let big = FootprintReport::new(512, 768, 12, docs + 1);
        prop_assert!(big.compressed_mb > small.compressed_mb);
        prop_assert!(big.continuous_mb > small.continuous_mb);
        if docs >= 60 {
            prop_assert!(small.compressed_mb < small.continuous_mb);
        }
    }
}
