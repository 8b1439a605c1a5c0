//! Byte-pair-encoding subword tokenizer.
//!
//! Words are split on whitespace and segmented into characters, with the
//! end-of-word marker [`END_OF_WORD`] fused onto the last character of every
//! word. Merges are learned greedily by pair frequency; ties go to the
//! lexicographically smallest `(left, right)` pair.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::hash::ContentHasher;
use crate::{Error, Result};

/// Marker appended to the final subword of every word.
pub const END_OF_WORD: &str = "</w>";

/// Reserved token ids. They always occupy the lowest ids of a [`Vocabulary`].
pub mod special {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const MASK: u32 = 3;
    pub const UNK: u32 = 4;
    pub const COUNT: usize = 5;
    pub const NAMES: [&str; COUNT] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

    #[inline]
    pub fn is_special(id: u32) -> bool {
        (id as usize) < COUNT
    }
}

/// Sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    /// Wrap content ids as `BOS ids.. EOS`.
    pub fn framed(content: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(special::BOS);
        ids.extend_from_slice(content);
        ids.push(special::EOS);
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Ids with a leading BOS and a trailing EOS removed.
    pub fn content(&self) -> &[u32] {
        let mut ids = &self.0[..];
        if ids.first() == Some(&special::BOS) {
            ids = &ids[1..];
        }
        if ids.last() == Some(&special::EOS) {
            ids = &ids[..ids.len() - 1];
        }
        ids
    }

    /// Tokens that a causal model scores: everything after an optional
    /// leading BOS (which is only ever used as context).
    pub fn scored(&self) -> &[u32] {
        match self.0.first() {
            Some(&special::BOS) => &self.0[1..],
            _ => &self.0,
        }
    }

    pub fn is_framed(&self) -> bool {
        self.0.len() >= 2 && self.0[0] == special::BOS && self.0[self.0.len() - 1] == special::EOS
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::InvalidToken { id, vocab_size }),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

/// Bidirectional subword string <-> id table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Build from an id-ordered token list. The first five entries must be
    /// the special token names.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < special::COUNT {
            return Err(Error::Config("vocabulary is missing special tokens".into()));
        }
        for (i, name) in special::NAMES.iter().enumerate() {
            if tokens[i] != *name {
                return Err(Error::Config(alloc::format!(
                    "id {i} must be special token {name}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut token_to_id = BTreeMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Config(alloc::format!("empty token at id {i}")));
            }
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Config(alloc::format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { id_to_token: tokens, token_to_id })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    fn push(&mut self, token: String) -> u32 {
        if let Some(&id) = self.token_to_id.get(&token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        id
    }
}

/// Ordered list of learned merges.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    pairs: Vec<(String, String)>,
    ranks: BTreeMap<String, BTreeMap<String, usize>>,
}

impl MergeTable {
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Self {
        let mut ranks: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for (i, (l, r)) in pairs.iter().enumerate() {
            ranks.entry(l.clone()).or_default().entry(r.clone()).or_insert(i);
        }
        Self { pairs, ranks }
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(left)?.get(right).copied()
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut chars: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = chars.last_mut() {
        last.push_str(END_OF_WORD);
    }
    chars
}

/// Learn a vocabulary and merge table from raw sentences.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<(Vocabulary, MergeTable)> {
    let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
    for sentence in corpus {
        for word in sentence.as_ref().split_whitespace() {
            *word_freq.entry(word).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let alphabet: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    let mut vocab = Vocabulary {
        id_to_token: Vec::new(),
        token_to_id: BTreeMap::new(),
    };
    for name in special::NAMES {
        vocab.push(name.to_string());
    }
    for c in &alphabet {
        vocab.push(c.to_string());
        let mut fin = c.to_string();
        fin.push_str(END_OF_WORD);
        vocab.push(fin);
    }

    let mut words: Vec<(Vec<String>, u64)> =
        word_freq.iter().map(|(w, &f)| (word_symbols(w), f)).collect();
    let mut pairs = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (symbols, freq) in &words {
            for w in symbols.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += freq;
            }
        }
        // BTreeMap iterates in (left, right) order, so the first maximum is
        // the lexicographically smallest among ties.
        let mut best: Option<((&str, &str), u64)> = None;
        for (&pair, &count) in &counts {
            if best.map_or(true, |(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let Some(((left, right), _)) = best else { break };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = alloc::format!("{left}{right}");
        for (symbols, _) in &mut words {
            merge_in_place(symbols, &left, &right, &merged);
        }
        vocab.push(merged);
        pairs.push((left, right));
    }
    Ok((vocab, MergeTable::from_pairs(pairs)))
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(core::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Segment one word by applying merges in learned order.
fn segment_word(word: &str, merges: &MergeTable) -> Vec<String> {
    let mut symbols = word_symbols(word);
    loop {
        let best = symbols
            .windows(2)
            .filter_map(|w| merges.rank(&w[0], &w[1]).map(|r| (r, w[0].clone(), w[1].clone())))
            .min_by_key(|(r, _, _)| *r);
        let Some((_, left, right)) = best else { break };
        let merged = alloc::format!("{left}{right}");
        merge_in_place(&mut symbols, &left, &right, &merged);
    }
    symbols
}

/// Encode a sentence into content ids (no BOS/EOS framing).
pub fn encode(text: &str, vocab: &Vocabulary, merges: &MergeTable) -> TokenSequence {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        for sym in segment_word(word, merges) {
            ids.push(vocab.id(&sym).unwrap_or(special::UNK));
        }
    }
    TokenSequence(ids)
}

/// Decode ids back to text. Special tokens are dropped and end-of-word
/// markers become single spaces.
pub fn decode(tokens: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    tokens.validate(vocab.len())?;
    let mut out = String::new();
    for &id in tokens.ids() {
        if special::is_special(id) {
            continue;
        }
        let tok = &vocab.id_to_token[id as usize];
        match tok.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                out.push_str(stem);
                out.push(' ');
            }
            None => out.push_str(tok),
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    Ok(out)
}

/// A trained vocabulary together with its merge table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub merges: MergeTable,
}

impl Tokenizer {
    pub fn train<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<Self> {
        let (vocab, merges) = train_bpe(corpus, num_merges)?;
        Ok(Self { vocab, merges })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        encode(text, &self.vocab, &self.merges)
    }

    /// Encode and frame with BOS/EOS, truncating content so the framed
    /// sequence has at most `max_len` ids.
    pub fn encode_framed(&self, text: &str, max_len: usize) -> TokenSequence {
        let content = self.encode(text).into_ids();
        let keep = content.len().min(max_len.saturating_sub(2));
        TokenSequence::framed(&content[..keep])
    }

    pub fn decode(&self, tokens: &TokenSequence) -> Result<String> {
        decode(tokens, &self.vocab)
    }

    /// Digest of the vocabulary and merges, used to tie checkpoints to the
    /// tokenizer they were trained with.
    pub fn fingerprint(&self) -> String {
        let mut h = ContentHasher::new();
        for tok in self.vocab.tokens() {
            h.str(tok);
        }
        for (l, r) in self.merges.pairs() {
            h.str(l).str(r);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn s(x: &str) -> String {
        x.to_string()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let (_, merges) = train_bpe(&["aaab", "aab"], 1).unwrap();
        assert_eq!(merges.pairs(), &[(s("a"), s("a"))]);
    }

    #[test]
    fn zero_merges_gives_base_alphabet_and_specials() {
        let (vocab, merges) = train_bpe(&["ab ba"], 0).unwrap();
        assert!(merges.is_empty());
        let expected: Vec<String> = special::NAMES
            .iter()
            .map(|n| s(n))
            .chain([s("a"), s("a</w>"), s("b"), s("b</w>")])
            .collect();
        assert_eq!(vocab.tokens(), &expected[..]);
    }

    #[test]
    fn merges_stop_when_pairs_exhausted() {
        let (vocab, merges) = train_bpe(&["xy"], 5).unwrap();
        assert_eq!(merges.pairs(), &[(s("x"), s("y</w>"))]);
        assert_eq!(vocab.len(), special::COUNT + 4 + 1);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert_eq!(train_bpe::<&str>(&[], 3).unwrap_err(), Error::EmptyCorpus);
        assert_eq!(train_bpe(&["   "], 3).unwrap_err(), Error::EmptyCorpus);
    }

    #[test]
    fn encode_applies_merge() {
        let tok = Tokenizer::train(&["aaab", "aab"], 1).unwrap();
        let ids = tok.encode("aaab");
        let pieces: Vec<&str> = ids.ids().iter().map(|&i| tok.vocab.token(i).unwrap()).collect();
        assert_eq!(pieces, vec!["aa", "a", "b</w>"]);
    }

    #[test]
    fn unknown_character_maps_to_unk() {
        let tok = Tokenizer::train(&["abc"], 2).unwrap();
        assert!(tok.encode("abz").ids().contains(&special::UNK));
    }

    #[test]
    fn decode_strips_specials() {
        let tok = Tokenizer::train(&["abc"], 2).unwrap();
        let framed = TokenSequence::new(vec![special::BOS, special::EOS]);
        assert_eq!(tok.decode(&framed).unwrap(), "");
        let enc = tok.encode_framed("abc cab", 64);
        assert_eq!(tok.decode(&enc).unwrap(), "abc cab");
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let tok = Tokenizer::train(&["abc"], 2).unwrap();
        let bad = TokenSequence::new(vec![tok.vocab_size() as u32]);
        assert!(matches!(tok.decode(&bad), Err(Error::InvalidToken { .. })));
    }

    #[test]
    fn framing_truncates_content() {
        let tok = Tokenizer::train(&["a b c d e"], 0).unwrap();
        let t = tok.encode_framed("a b c d e", 4);
        assert_eq!(t.len(), 4);
        assert!(t.is_framed());
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_missing_specials() {
        let mut toks: Vec<String> = special::NAMES.iter().map(|n| s(n)).collect();
        toks.push(s("a"));
        toks.push(s("a"));
        assert!(Vocabulary::from_tokens(toks).is_err());
        assert!(Vocabulary::from_tokens(vec![s("a")]).is_err());
    }
}
