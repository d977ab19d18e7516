//! Compiled-in miniature corpora for tests and offline smoke runs, plus a
//! deterministic stand-in for the pretrained embedding file.
//!
//! A fixture parse failure is a build defect, so the loaders panic rather
//! than propagate errors.

use crate::corpus::{
    parse_sis, parse_tsv, read_word2vec, write_word2vec_binary, Dataset, EmbeddingMatrix,
    RejectReport, SisPair, Vocab,
};
use crate::rng::stream;
use rand::Rng;

pub const BINARY_64_TSV: &str = include_str!("../fixtures/binary_64.tsv");
pub const TREC_TRAIN_TSV: &str = include_str!("../fixtures/trec_fixture.train.tsv");
pub const TREC_TEST_TSV: &str = include_str!("../fixtures/trec_fixture.test.tsv");
pub const SIS_TSV: &str = include_str!("../fixtures/sis_fixture.tsv");

/// 64 two-class sentences, built to be separable by every architecture.
pub fn binary64() -> Dataset {
    let ds = parse_tsv(BINARY_64_TSV.as_bytes(), None);
    assert!(ds.rejects.rejects.is_empty(), "fixture must parse cleanly");
    assert_eq!(ds.examples.len(), 64);
    assert_eq!(ds.n_classes(), 2);
    ds
}

/// Six-class question fixture with a held-out test half, sharing one
/// label set so train and test ids agree.
pub fn trec6() -> (Dataset, Dataset) {
    let train = parse_tsv(TREC_TRAIN_TSV.as_bytes(), None);
    assert!(train.rejects.rejects.is_empty(), "fixture must parse cleanly");
    assert_eq!(train.examples.len(), 120);
    assert_eq!(train.n_classes(), 6);
    let test = parse_tsv(TREC_TEST_TSV.as_bytes(), Some(&train.labels));
    assert!(test.rejects.rejects.is_empty(), "fixture must parse cleanly");
    assert_eq!(test.examples.len(), 30);
    (train, test)
}

/// Argument-swap pairs scored 1.0 (swap preserves meaning) or 5.0 (swap
/// reverses it). The raw file carries two mid-score lines on purpose; the
/// parser keeps only the extremes.
pub fn sis_pairs(limit: usize, seed: u64) -> (Vec<SisPair>, RejectReport) {
    parse_sis(SIS_TSV.as_bytes(), limit, seed)
}

/// A dataset fixture by registry name.
pub fn dataset(name: &str) -> Option<Dataset> {
    match name {
        "binary64" => Some(binary64()),
        "trec6" => Some(trec6().0),
        _ => None,
    }
}

/// Standard-split test half, when the fixture has one.
pub fn test_split(name: &str) -> Option<Dataset> {
    match name {
        "trec6" => Some(trec6().1),
        _ => None,
    }
}

/// Bytes in the pretrained-embedding binary layout covering most of the
/// vocabulary, with values seeded per word so the file is reproducible.
/// Every fourth word is left out to keep the fallback path exercised.
pub fn word2vec_bytes(vocab: &Vocab, dim: usize, seed: u64) -> Vec<u8> {
    let mut entries: Vec<(&str, Vec<f32>)> = Vec::new();
    for (id, token) in vocab.iter() {
        if id < 2 || id % 4 == 3 {
            continue;
        }
        let mut rng = stream(seed, &format!("w2v-fixture-{token}"));
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        entries.push((vocab.token(id).unwrap(), v));
    }
    write_word2vec_binary(&entries, dim)
}

/// The fixture embedding table a real file load would produce.
pub fn embeddings(vocab: &Vocab, dim: usize, seed: u64) -> EmbeddingMatrix {
    let bytes = word2vec_bytes(vocab, dim, seed);
    read_word2vec(bytes.as_slice(), vocab, seed, "fixture").expect("fixture embeddings parse")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;

    #[test]
    fn binary_fixture_is_balanced() {
        let ds = binary64();
        assert_eq!(ds.class_counts(), vec![32, 32]);
        assert_eq!(ds.labels, vec!["neg".to_string(), "pos".to_string()]);
    }

    #[test]
    fn trec_fixture_is_balanced_and_consistent() {
        let (train, test) = trec6();
        assert_eq!(train.class_counts(), vec![20; 6]);
        assert_eq!(test.class_counts(), vec![5; 6]);
        assert_eq!(train.labels, test.labels);
    }

    #[test]
    fn sis_fixture_keeps_only_extreme_scores() {
        let (pairs, rejects) = sis_pairs(1000, 0);
        assert_eq!(pairs.len(), 24);
        assert_eq!(rejects.rejects.len(), 2, "mid-score lines are dropped");
        assert!(pairs.iter().all(|p| p.score == 1.0 || p.score == 5.0));
        let fives = pairs.iter().filter(|p| p.score == 5.0).count();
        assert_eq!(fives, 12);
    }

    #[test]
    fn fixture_embeddings_are_reproducible_and_partial() {
        let ds = binary64();
        let vocab = build_vocab(&ds.examples, 1);
        let a = embeddings(&vocab, 16, 5);
        let b = embeddings(&vocab, 16, 5);
        assert_eq!(a.data, b.data);
        let hits = a.hit_count();
        assert!(hits > 0 && hits < vocab.len() - 2, "some words must miss: {hits}");
        assert!(a.data[..16].iter().all(|&v| v == 0.0), "pad row stays zero");
    }
}
