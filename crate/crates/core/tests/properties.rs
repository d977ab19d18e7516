//! Property tests for the corpus pipeline and the probe statistics.
//!
//! Each property is stated over random data. Where floating point makes
//! bitwise equality impossible (affine rescaling perturbs sums at the ulp
//! level) the tolerance is stated next to the assertion; everywhere else
//! the assertions are exact.

use std::io::Cursor;

use lietext_core::corpus::{
    build_vocab, load_dataset, parse_tsv, random_embeddings, read_word2vec, save_tsv,
    write_word2vec_binary, Example, Vocab, PAD_ID,
};
use lietext_core::harness::{cosine_similarity, pearson, spearman};
use proptest::prelude::*;

// ---- probe statistics ------------------------------------------------

fn spread(v: &[f64]) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

fn paired_vecs(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|len| {
        (
            proptest::collection::vec(-10.0..10.0f64, len),
            proptest::collection::vec(-10.0..10.0f64, len),
        )
    })
}

proptest! {
    // Shifting and positively scaling either argument leaves the
    // correlation unchanged. The mean subtraction cancels the shift only
    // up to rounding, so the comparison carries a small tolerance.
    #[test]
    fn pearson_is_invariant_under_positive_affine_maps(
        (xs, ys) in paired_vecs(3..=24usize),
        a in 0.1..10.0f64,
        b in -10.0..10.0f64,
    ) {
        prop_assume!(spread(&xs) > 0.5 && spread(&ys) > 0.5);
        let r = pearson(&xs, &ys).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));

        let xm: Vec<f64> = xs.iter().map(|&x| a * x + b).collect();
        let ym: Vec<f64> = ys.iter().map(|&y| a * y - b).collect();
        let rx = pearson(&xm, &ys).unwrap();
        let ry = pearson(&xs, &ym).unwrap();
        prop_assert!((rx - r).abs() < 1e-9, "x side moved: {r} -> {rx}");
        prop_assert!((ry - r).abs() < 1e-9, "y side moved: {r} -> {ry}");
    }

    // Rank correlation depends only on the orderings. Integer-valued
    // draws keep n^3 + 2n exact in f64, so the mapped ranks and therefore
    // the statistic are bitwise identical, ties included.
    #[test]
    fn spearman_is_invariant_under_strictly_monotone_maps(
        n in 3..=20usize,
        seed_x in proptest::collection::vec(-50i32..=50, 3..=20),
        seed_y in proptest::collection::vec(-50i32..=50, 3..=20),
    ) {
        let xs: Vec<f64> = seed_x.iter().cycle().take(n).map(|&v| v as f64).collect();
        let ys: Vec<f64> = seed_y.iter().cycle().take(n).map(|&v| v as f64).collect();
        prop_assume!(spread(&xs) > 0.0 && spread(&ys) > 0.0);
        let mono = |v: f64| v * v * v + 2.0 * v;
        let xm: Vec<f64> = xs.iter().map(|&v| mono(v)).collect();
        let ym: Vec<f64> = ys.iter().map(|&v| mono(v)).collect();

        let r = spearman(&xs, &ys).unwrap();
        prop_assert_eq!(spearman(&xm, &ys).unwrap(), r);
        prop_assert_eq!(spearman(&xs, &ym).unwrap(), r);
        prop_assert_eq!(spearman(&xm, &ym).unwrap(), r);
    }

    #[test]
    fn cosine_similarity_ignores_positive_scaling(
        (u, v) in paired_vecs(2..=16usize),
        alpha in 1e-3..1e3f64,
        beta in 1e-3..1e3f64,
    ) {
        let norm = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
        let us: Vec<f64> = u.iter().map(|&x| alpha * x).collect();
        let vs: Vec<f64> = v.iter().map(|&x| beta * x).collect();
        let c = cosine_similarity(&u, &v).unwrap();
        let cs = cosine_similarity(&us, &vs).unwrap();
        prop_assert!((cs - c).abs() < 1e-12, "{c} -> {cs}");
    }
}

// ---- corpus round trips ----------------------------------------------

/// Tokens the tokenizer maps to themselves, so space-joining is lossless.
fn stable_token() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-z]{1,6}",
        1 => Just(".".to_string()),
        1 => Just("!".to_string()),
        1 => Just("'".to_string()),
        1 => Just("n't".to_string()),
    ]
}

fn tsv_lines() -> impl Strategy<Value = Vec<(String, Vec<String>)>> {
    proptest::collection::vec(
        ("[a-z]{1,4}", proptest::collection::vec(stable_token(), 1..8)),
        1..30,
    )
}

proptest! {
    #[test]
    fn tsv_save_load_round_trips_examples_and_labels(lines in tsv_lines()) {
        let text: String = lines
            .iter()
            .map(|(label, words)| format!("{label}\t{}\n", words.join(" ")))
            .collect();
        let ds = parse_tsv(Cursor::new(text.into_bytes()), None);
        prop_assert_eq!(ds.rejects.rejects.len(), 0);
        prop_assert_eq!(ds.examples.len(), lines.len());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.tsv");
        save_tsv(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();

        prop_assert_eq!(&back.examples, &ds.examples);
        prop_assert_eq!(&back.labels, &ds.labels);
        prop_assert_eq!(back.rejects.rejects.len(), 0);
    }

    #[test]
    fn vocabulary_is_independent_of_example_order(
        tokens in proptest::collection::vec(
            proptest::collection::vec("[a-d]{1,2}", 1..6), 1..20),
        perm_seed in any::<u64>(),
        min_count in 1usize..=2,
    ) {
        let examples: Vec<Example> = tokens
            .into_iter()
            .map(|t| Example { label: 0, tokens: t })
            .collect();
        let mut shuffled = examples.clone();
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(perm_seed);
        shuffled.shuffle(&mut rng);

        prop_assert_eq!(
            build_vocab(&examples, min_count),
            build_vocab(&shuffled, min_count)
        );
    }
}

#[test]
fn frequency_ties_break_lexicographically() {
    let ex = |words: &[&str]| Example {
        label: 0,
        tokens: words.iter().map(|s| s.to_string()).collect(),
    };
    // b, a, c all occur once; b twice in the second corpus
    let v = build_vocab(&[ex(&["b"]), ex(&["a"]), ex(&["c"])], 1);
    let order: Vec<&str> = v.iter().map(|(_, t)| t).collect();
    assert_eq!(order, ["<pad>", "<unk>", "a", "b", "c"]);

    let v = build_vocab(&[ex(&["b", "b", "a"]), ex(&["c"])], 1);
    let order: Vec<&str> = v.iter().map(|(_, t)| t).collect();
    assert_eq!(order, ["<pad>", "<unk>", "b", "a", "c"]);
}

// ---- malformed input is rejected, never skipped ----------------------

#[derive(Debug, Clone)]
enum Line {
    Good(usize, Vec<String>),
    NoTab(String),
    EmptyLabel,
    EmptyText(usize),
    Blank,
    UnknownLabel(String),
}

fn line_strategy() -> impl Strategy<Value = Line> {
    prop_oneof![
        4 => (0usize..2, proptest::collection::vec("[a-z]{1,5}", 1..5))
            .prop_map(|(l, w)| Line::Good(l, w)),
        1 => "[a-z ]{1,10}".prop_map(Line::NoTab),
        1 => Just(Line::EmptyLabel),
        1 => (0usize..2).prop_map(Line::EmptyText),
        1 => Just(Line::Blank),
        1 => "[q-z]{5,8}".prop_map(Line::UnknownLabel),
    ]
}

proptest! {
    #[test]
    fn rejects_are_counted_line_by_line(lines in proptest::collection::vec(line_strategy(), 0..40)) {
        let labels = ["neg".to_string(), "pos".to_string()];
        let render = |l: &Line| match l {
            Line::Good(i, words) => format!("{}\t{}", labels[*i], words.join(" ")),
            // a lone word never contains a tab, so the line is malformed
            Line::NoTab(text) => text.replace('\t', " "),
            Line::EmptyLabel => "  \tsome text".to_string(),
            Line::EmptyText(i) => format!("{}\t  ", labels[*i]),
            Line::Blank => "   ".to_string(),
            Line::UnknownLabel(l) => format!("{l}\tsome text"),
        };
        let text: String = lines.iter().map(|l| render(l) + "\n").collect();
        let ds = parse_tsv(Cursor::new(text.into_bytes()), Some(&labels));

        let good: Vec<&Line> = lines.iter().filter(|l| matches!(l, Line::Good(..))).collect();
        prop_assert_eq!(ds.rejects.lines, lines.len());
        prop_assert_eq!(ds.rejects.rejects.len(), lines.len() - good.len());
        prop_assert_eq!(ds.rejects.accepted(), good.len());
        prop_assert_eq!(ds.examples.len(), good.len());

        // accepted examples keep input order and content
        for (ex, line) in ds.examples.iter().zip(&good) {
            let Line::Good(label, words) = line else { unreachable!() };
            prop_assert_eq!(ex.label, *label);
            prop_assert_eq!(&ex.tokens, words);
        }
        // every reject names its line and a reason
        let bad_linenos: Vec<usize> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| !matches!(l, Line::Good(..)))
            .map(|(i, _)| i + 1)
            .collect();
        let reported: Vec<usize> = ds.rejects.rejects.iter().map(|(n, _)| *n).collect();
        prop_assert_eq!(reported, bad_linenos);
        for (_, reason) in &ds.rejects.rejects {
            prop_assert!(!reason.is_empty());
        }
    }
}

// ---- embedding provenance --------------------------------------------

fn probe_vocab() -> Vocab {
    let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let ex = Example {
        label: 0,
        tokens: words,
    };
    build_vocab(&[ex], 1)
}

fn vector(dim: usize, tag: u32) -> Vec<f32> {
    (0..dim).map(|j| (tag as f32) + (j as f32) * 0.25).collect()
}

proptest! {
    // The provenance mask partitions rows exactly: a row is the file's
    // vector iff its token is in the file, the pad row is zero no matter
    // what the file claims, and everything else is a seeded draw.
    #[test]
    fn embedding_rows_partition_into_pretrained_random_and_pad(
        in_file in proptest::collection::vec(any::<bool>(), 10),
        pad_in_file in any::<bool>(),
        order_seed in any::<u64>(),
        dim in 2usize..6,
        seed in any::<u64>(),
    ) {
        let vocab = probe_vocab();
        let mut names: Vec<String> = Vec::new();
        for (i, &present) in in_file.iter().enumerate() {
            if present {
                names.push(format!("w{i}"));
            }
        }
        names.push("junk1".to_string());
        names.push("junk2".to_string());
        if pad_in_file {
            names.push("<pad>".to_string());
        }
        let mut entries: Vec<(&str, Vec<f32>)> = names
            .iter()
            .enumerate()
            .map(|(tag, n)| (n.as_str(), vector(dim, tag as u32)))
            .collect();

        let bytes = write_word2vec_binary(&entries, dim);
        let emb = read_word2vec(Cursor::new(&bytes), &vocab, seed, "mem").unwrap();

        prop_assert_eq!(emb.dim, dim);
        prop_assert_eq!(emb.vocab_len(), vocab.len());
        prop_assert!(!emb.found[PAD_ID]);
        prop_assert!(emb.data[..dim].iter().all(|&v| v == 0.0), "pad row must stay zero");

        let mut hits = 0usize;
        for (id, token) in vocab.iter() {
            if id == PAD_ID {
                continue;
            }
            let row = &emb.data[id * dim..(id + 1) * dim];
            let expect = entries.iter().find(|(n, _)| *n == token);
            match expect {
                Some((_, v)) => {
                    prop_assert!(emb.found[id], "{token} is pretrained");
                    prop_assert_eq!(row, &v[..]);
                    hits += 1;
                }
                None => prop_assert!(!emb.found[id], "{token} is not in the file"),
            }
        }
        prop_assert_eq!(emb.hit_count(), hits);

        // the same file and seed reproduce the matrix bitwise, and the
        // file's word order cannot matter because fallback draws go in
        // vocab id order
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(order_seed);
        entries.shuffle(&mut rng);
        let bytes2 = write_word2vec_binary(&entries, dim);
        let emb2 = read_word2vec(Cursor::new(&bytes2), &vocab, seed, "mem").unwrap();
        prop_assert_eq!(&emb.data, &emb2.data);
        prop_assert_eq!(&emb.found, &emb2.found);
    }

    #[test]
    fn word2vec_write_read_round_trips_every_vector(
        dim in 2usize..6,
        seed in any::<u64>(),
    ) {
        let vocab = probe_vocab();
        let entries: Vec<(String, Vec<f32>)> = vocab
            .iter()
            .filter(|&(id, _)| id != PAD_ID)
            .map(|(id, t)| (t.to_string(), vector(dim, id as u32)))
            .collect();
        let refs: Vec<(&str, Vec<f32>)> =
            entries.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
        let bytes = write_word2vec_binary(&refs, dim);
        let emb = read_word2vec(Cursor::new(&bytes), &vocab, seed, "mem").unwrap();

        prop_assert_eq!(emb.hit_count(), vocab.len() - 1);
        for (name, vec) in &entries {
            let id = vocab.id(name).unwrap();
            prop_assert_eq!(&emb.data[id * dim..(id + 1) * dim], &vec[..]);
        }
    }
}

#[test]
fn duplicate_file_entries_keep_the_first_vector() {
    let vocab = probe_vocab();
    let dim = 3;
    let first = vector(dim, 7);
    let entries: Vec<(&str, Vec<f32>)> =
        vec![("w3", first.clone()), ("w3", vector(dim, 8))];
    let bytes = write_word2vec_binary(&entries, dim);
    let emb = read_word2vec(Cursor::new(&bytes), &vocab, 0, "mem").unwrap();
    let id = vocab.id("w3").unwrap();
    assert_eq!(&emb.data[id * dim..(id + 1) * dim], &first[..]);
    assert_eq!(emb.hit_count(), 1);
}

#[test]
fn random_embeddings_zero_only_the_pad_row() {
    let emb = random_embeddings(12, 5, 9);
    assert!(emb.data[..5].iter().all(|&v| v == 0.0));
    for id in 1..12 {
        let row = &emb.data[id * 5..(id + 1) * 5];
        assert!(row.iter().any(|&v| v != 0.0), "row {id} must be initialized");
    }
    assert_eq!(emb.hit_count(), 0);
}
