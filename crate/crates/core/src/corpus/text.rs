use indexmap::IndexMap;

use super::Example;

/// Reserved id for right-padding.
pub const PAD_ID: usize = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: usize = 1;

const SEPARABLE: &[char] = &['.', ',', '!', '?', '\'', '"', '(', ')', ':', ';'];

/// Lowercase and split text into tokens. Punctuation in `.,!?'"():;`
/// separates into single-character tokens, except that a trailing "n't"
/// stays one token with its apostrophe ("don't" becomes `do`, `n't`).
///
/// Idempotent over its own output: tokenizing the space-joined tokens
/// yields the same tokens, which is what makes TSV round-trips lossless.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let spread = lowered.replace("n't", " n't ");
    let mut out = Vec::new();
    for word in spread.split_whitespace() {
        if word == "n't" {
            out.push(word.to_string());
            continue;
        }
        let mut run = String::new();
        for ch in word.chars() {
            if SEPARABLE.contains(&ch) {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(ch.to_string());
            } else {
                run.push(ch);
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

/// Token-to-id mapping with reserved pad and unk entries. Vocabulary order
/// is frequency-descending with lexicographic tie-breaks, so the same
/// corpus always yields the same ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: IndexMap<String, usize>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// Iterate `(id, token)` in id order, reserved entries included.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.tokens.iter().enumerate().map(|(i, t)| (i, t.as_str()))
    }
}

/// Build a vocabulary from tokenized examples, keeping tokens that occur
/// at least `min_count` times. Ids 0 and 1 are pad and unk.
pub fn build_vocab(examples: &[Example], min_count: usize) -> Vocab {
    let mut counts: IndexMap<&str, usize> = IndexMap::new();
    for e in examples {
        for t in &e.tokens {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Vocab { tokens, index }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_handles_contractions_and_punctuation() {
        assert_eq!(tokenize("Don't stop!"), vec!["do", "n't", "stop", "!"]);
        assert_eq!(
            tokenize("A (good) movie, isn't it?"),
            vec!["a", "(", "good", ")", "movie", ",", "is", "n't", "it", "?"]
        );
        assert_eq!(tokenize("it's"), vec!["it", "'", "s"]);
        assert_eq!(tokenize("  spaced   out  "), vec!["spaced", "out"]);
        assert!(tokenize("  \t ").is_empty());
    }

    #[test]
    fn tokenize_is_idempotent() {
        for text in [
            "Don't stop believin'!",
            "A (good) movie; isn't it... \"great\"?",
            "can't won't shan't n't",
            "plain words only",
        ] {
            let once = tokenize(text);
            let twice = tokenize(&once.join(" "));
            assert_eq!(once, twice, "{text}");
        }
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographically() {
        let examples = vec![
            Example {
                label: 0,
                tokens: ["b", "b", "a", "c", "c"].iter().map(|s| s.to_string()).collect(),
            },
            Example {
                label: 1,
                tokens: ["a", "d"].iter().map(|s| s.to_string()).collect(),
            },
        ];
        let v = build_vocab(&examples, 1);
        // a=2, b=2, c=2, d=1; ties break lexicographically
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.token(1), Some("<unk>"));
        assert_eq!(v.token(2), Some("a"));
        assert_eq!(v.token(3), Some("b"));
        assert_eq!(v.token(4), Some("c"));
        assert_eq!(v.token(5), Some("d"));
        assert_eq!(v.id("zzz"), None);
        assert_eq!(
            v.encode(&["a".to_string(), "zzz".to_string()]),
            vec![2, UNK_ID]
        );
    }

    #[test]
    fn min_count_prunes_rare_tokens() {
        let examples = vec![Example {
            label: 0,
            tokens: ["x", "x", "rare"].iter().map(|s| s.to_string()).collect(),
        }];
        let v = build_vocab(&examples, 2);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("rare"), None);
    }
}
