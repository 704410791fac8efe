//! Word-level vocabulary, tokenization and MLM masking for clinical notes.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const N_RESERVED: usize = 5;

const RESERVED: [&str; N_RESERVED] = ["[PAD]", "[BOS]", "[EOS]", "[MASK]", "[UNK]"];

/// Lowercased alphanumeric words; every other character separates words.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ids are assigned by descending frequency, ties broken lexicographically,
    /// so the result does not depend on corpus order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Text("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for w in normalize(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its ordered token list (as stored in
    /// checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < N_RESERVED || tokens[..N_RESERVED] != RESERVED {
            return Err(Error::Text("token list does not start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Text(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str, l_max: usize) -> TokenSequence {
        let l_max = l_max.max(3);
        let mut ids = Vec::with_capacity(l_max);
        ids.push(BOS);
        ids.extend(
            normalize(text)
                .iter()
                .take(l_max - 2)
                .map(|w| self.id(w).unwrap_or(UNK)),
        );
        ids.push(EOS);
        ids.resize(l_max, PAD);
        TokenSequence { ids }
    }

    /// Words for every non-reserved id up to the first EOS, space-joined.
    /// UNK renders as its reserved spelling.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS | MASK => {}
                _ => words.push(self.token(id).unwrap_or(RESERVED[UNK])),
            }
        }
        words.join(" ")
    }
}

/// `BOS, words…, EOS, PAD…` padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Prefix through the first EOS (the whole sequence if there is none).
    pub fn content(&self) -> &[usize] {
        match self.ids.iter().position(|&t| t == EOS) {
            Some(p) => &self.ids[..=p],
            None => &self.ids,
        }
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }
}

fn maskable(id: usize) -> bool {
    id >= N_RESERVED
}

/// Output of [`apply_mlm_mask`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmExample {
    pub masked: TokenSequence,
    /// Original id at each selected position, `None` elsewhere.
    pub labels: Vec<Option<usize>>,
}

/// Selects each maskable position with probability `rate`; a selected
/// token becomes MASK (80%), a random vocabulary word (10%) or stays as is
/// (10%).
pub fn apply_mlm_mask(seq: &TokenSequence, rate: f64, seed: u64, vocab_size: usize) -> Result<MlmExample> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Text(format!("mask rate {rate} outside (0, 1)")));
    }
    if vocab_size <= N_RESERVED {
        return Err(Error::Text("vocabulary has no maskable tokens".into()));
    }
    if !seq.ids.iter().any(|&t| maskable(t)) {
        return Err(Error::Text("sequence has no maskable positions".into()));
    }
    let mut rng = keyed(Stream::MlmMask, &[seed]);
    let mut masked = seq.clone();
    let mut labels = vec![None; seq.len()];
    for (i, &id) in seq.ids.iter().enumerate() {
        if !maskable(id) {
            continue;
        }
        if rng.gen::<f64>() >= rate {
            continue;
        }
        labels[i] = Some(id);
        let action: f64 = rng.gen();
        if action < 0.8 {
            masked.ids[i] = MASK;
        } else if action < 0.9 {
            masked.ids[i] = rng.gen_range(N_RESERVED..vocab_size);
        }
    }
    Ok(MlmExample { masked, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocabulary::build(&["fever fever cough"]).unwrap();
        assert_eq!(v.id("fever"), Some(N_RESERVED));
        assert_eq!(v.id("cough"), Some(N_RESERVED + 1));
        let a = Vocabulary::build(&["b a", "c a", "b"]).unwrap();
        let b = Vocabulary::build(&["b", "c a", "b a"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens()[N_RESERVED..], ["a", "b", "c"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(Vocabulary::build(&empty).is_err());
    }

    #[test]
    fn tokenize_edge_cases() {
        let v = Vocabulary::build(&["fever cough"]).unwrap();
        let empty = v.tokenize("", 6);
        assert_eq!(empty.ids, vec![BOS, EOS, PAD, PAD, PAD, PAD]);
        let s = v.tokenize("Fever, cough.", 6);
        assert_eq!(s.ids, vec![BOS, v.id("fever").unwrap(), v.id("cough").unwrap(), EOS, PAD, PAD]);
        assert_eq!(v.detokenize(&s.ids), "fever cough");
        let unk = v.tokenize("fever sweats", 5);
        assert_eq!(unk.ids[2], UNK);
        let long = v.tokenize("fever cough fever cough", 4);
        assert_eq!(long.ids, vec![BOS, v.id("fever").unwrap(), v.id("cough").unwrap(), EOS]);
    }

    #[test]
    fn from_tokens_round_trip() {
        let v = Vocabulary::build(&["night sweats and fever"]).unwrap();
        let w = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(v, w);
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn mlm_degenerate_rate_selects_nothing() {
        let v = Vocabulary::build(&["fever cough chest pain"]).unwrap();
        let s = v.tokenize("fever cough chest pain", 8);
        let ex = apply_mlm_mask(&s, 1e-9, 7, v.len()).unwrap();
        assert!(ex.labels.iter().all(Option::is_none));
        assert_eq!(ex.masked, s);
    }

    #[test]
    fn mlm_rejects_sequences_without_words() {
        let v = Vocabulary::build(&["fever"]).unwrap();
        let s = v.tokenize("", 4);
        assert!(apply_mlm_mask(&s, 0.15, 0, v.len()).is_err());
    }
}
