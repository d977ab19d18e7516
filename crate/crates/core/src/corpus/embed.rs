use std::io::{BufReader, Read};
use std::path::Path;

use rand::Rng;

use super::{CorpusError, Result, Vocab, PAD_ID};
use crate::real::Real;
use crate::rng::stream;

/// Half-width of the uniform init used for words without a pretrained
/// vector; matches the spread of typical pretrained components.
const OOV_HALF_WIDTH: f64 = 0.25;

/// Dense `[vocab_len, dim]` embedding table in file precision, with a
/// per-word flag for whether the vector came from the pretrained file.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
    pub found: Vec<bool>,
}

impl EmbeddingMatrix {
    pub fn vocab_len(&self) -> usize {
        self.found.len()
    }

    pub fn hit_count(&self) -> usize {
        self.found.iter().filter(|&&f| f).count()
    }

    pub fn to_real<R: Real>(&self) -> Vec<R> {
        self.data.iter().map(|&v| R::from_f64(v as f64)).collect()
    }
}

/// Read a word2vec-format binary file and assemble vectors for `vocab`.
/// Words absent from the file get seeded uniform vectors drawn in vocab id
/// order; the pad row is always zero.
pub fn load_word2vec_binary(path: &Path, vocab: &Vocab, seed: u64) -> Result<EmbeddingMatrix> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_word2vec(BufReader::new(file), vocab, seed, &path.display().to_string())
}

/// Reader-level word2vec parsing, so in-memory fixtures load the same way
/// as files. The format is an ASCII `"<words> <dim>\n"` header, then per
/// word its bytes up to a space and `dim` little-endian f32 values, each
/// record optionally newline-terminated.
pub fn read_word2vec<R: Read>(
    mut reader: R,
    vocab: &Vocab,
    seed: u64,
    label: &str,
) -> Result<EmbeddingMatrix> {
    let bad = |reason: &str| CorpusError::BadWord2Vec {
        path: label.to_string(),
        reason: reason.to_string(),
    };
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if read_exact_or_eof(&mut reader, &mut byte).map_err(|e| bad(&e))? == 0 {
            return Err(bad("missing header"));
        }
        if byte[0] == b'\n' {
            break;
        }
        if header.len() > 64 {
            return Err(bad("header line too long"));
        }
        header.push(byte[0]);
    }
    let header = String::from_utf8(header).map_err(|_| bad("header is not ascii"))?;
    let mut parts = header.split_whitespace();
    let words: usize = parts
        .next()
        .and_then(|w| w.parse().ok())
        .ok_or_else(|| bad("header word count unparseable"))?;
    let dim: usize = parts
        .next()
        .and_then(|w| w.parse().ok())
        .ok_or_else(|| bad("header dimension unparseable"))?;
    if dim == 0 {
        return Err(bad("zero dimension"));
    }

    let mut data = vec![0.0f32; vocab.len() * dim];
    let mut found = vec![false; vocab.len()];
    let mut vecbuf = vec![0u8; dim * 4];
    for _ in 0..words {
        let mut word = Vec::new();
        loop {
            if read_exact_or_eof(&mut reader, &mut byte).map_err(|e| bad(&e))? == 0 {
                return Err(bad("file ends inside a word"));
            }
            match byte[0] {
                b' ' if word.is_empty() => continue,
                b'\n' if word.is_empty() => continue,
                b' ' => break,
                c => word.push(c),
            }
        }
        reader
            .read_exact(&mut vecbuf)
            .map_err(|_| bad("file ends inside a vector"))?;
        let word = String::from_utf8_lossy(&word);
        let Some(id) = vocab.id(&word) else { continue };
        if id == PAD_ID || found[id] {
            continue;
        }
        for (j, chunk) in vecbuf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(bad(&format!("non-finite component for word {word:?}")));
            }
            data[id * dim + j] = v;
        }
        found[id] = true;
    }

    // seeded fallback vectors, drawn in id order so the file's word order
    // cannot change them
    let mut rng = stream(seed, "oov-init");
    for id in 0..vocab.len() {
        if id == PAD_ID || found[id] {
            continue;
        }
        for j in 0..dim {
            data[id * dim + j] = rng.gen_range(-OOV_HALF_WIDTH..OOV_HALF_WIDTH) as f32;
        }
    }
    Ok(EmbeddingMatrix { dim, data, found })
}

fn read_exact_or_eof<R: Read>(reader: &mut R, buf: &mut [u8]) -> std::result::Result<usize, String> {
    match reader.read(buf) {
        Ok(n) => Ok(n),
        Err(e) => Err(format!("read failed: {e}")),
    }
}

/// Seeded uniform embeddings with a zero pad row, for training without
/// pretrained vectors.
pub fn random_embeddings(vocab_len: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = stream(seed, "embed-init");
    let mut data = vec![0.0f32; vocab_len * dim];
    for id in 0..vocab_len {
        if id == PAD_ID {
            continue;
        }
        for j in 0..dim {
            data[id * dim + j] = rng.gen_range(-OOV_HALF_WIDTH..OOV_HALF_WIDTH) as f32;
        }
    }
    EmbeddingMatrix {
        dim,
        data,
        found: vec![false; vocab_len],
    }
}

/// Serialize `(word, vector)` pairs in the word2vec binary layout.
/// Fixtures and round-trip tests build files with this.
pub fn write_word2vec_binary(entries: &[(&str, Vec<f32>)], dim: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("{} {}\n", entries.len(), dim).as_bytes());
    for (word, vector) in entries {
        assert_eq!(vector.len(), dim, "fixture vector length");
        out.extend_from_slice(word.as_bytes());
        out.push(b' ');
        for v in vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(b'\n');
    }
    out
}
