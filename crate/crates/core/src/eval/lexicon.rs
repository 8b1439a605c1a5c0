use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::{Error, Result};

/// Word-level formality scores in `[-1, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FormalityLexicon {
    scores: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Formality {
    Formal,
    Informal,
}

/// Lowercase and strip surrounding punctuation so "Hello," matches "hello".
pub fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'').to_lowercase()
}

impl FormalityLexicon {
    pub fn new<I: IntoIterator<Item = (String, f64)>>(entries: I) -> Result<Self> {
        let mut scores = BTreeMap::new();
        for (w, s) in entries {
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::Config(alloc::format!("lexicon score {s} for {w:?} outside [-1, 1]")));
            }
            scores.insert(normalize_word(&w), s);
        }
        Ok(Self { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score(&self, word: &str) -> Option<f64> {
        self.scores.get(&normalize_word(word)).copied()
    }
}

/// Mean word score mapped from `[-1, 1]` to `[0, 100]`; reported as
/// `100 − n` for an informal target. Unknown words score 0.
pub fn lexical_formality_score(sentence: &str, lexicon: &FormalityLexicon, target: Formality) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for w in sentence.split_whitespace() {
        let w = normalize_word(w);
        if w.is_empty() {
            continue;
        }
        sum += lexicon.scores.get(&w).copied().unwrap_or(0.0);
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateInput("sentence has no words"));
    }
    let n = 50.0 * (sum / count as f64 + 1.0);
    Ok(match target {
        Formality::Formal => n,
        Formality::Informal => 100.0 - n,
    })
}
