//! Style-labelled corpora, style-agnostic mixing, and the two corruption
//! processes: MLM masking for pretraining and drop/mask noise for
//! denoising autoencoding.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::hash::ContentHasher;
use crate::tokenizer::{special, TokenSequence, Tokenizer};
use crate::{seeded_rng, Error, Result, Rng};

/// Sentences labelled with exactly one style from one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct StyledCorpus {
    sentences: Vec<TokenSequence>,
    pub dimension: String,
    pub label: String,
}

impl StyledCorpus {
    pub fn new(sentences: Vec<TokenSequence>, dimension: &str, label: &str) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if sentences.iter().any(|s| s.content().is_empty()) {
            return Err(Error::DegenerateInput("corpus contains an empty sentence"));
        }
        Ok(Self { sentences, dimension: dimension.into(), label: label.into() })
    }

    /// Tokenize raw lines, skipping blank ones. Sentences are framed with
    /// BOS/EOS and truncated to `max_len` ids.
    pub fn from_lines<S: AsRef<str>>(
        lines: &[S],
        dimension: &str,
        label: &str,
        tokenizer: &Tokenizer,
        max_len: usize,
    ) -> Result<Self> {
        let sentences: Vec<TokenSequence> = lines
            .iter()
            .map(AsRef::as_ref)
            .filter(|l| !l.trim().is_empty())
            .map(|l| tokenizer.encode_framed(l, max_len))
            .filter(|t| !t.content().is_empty())
            .collect();
        Self::new(sentences, dimension, label)
    }

    pub fn sentences(&self) -> &[TokenSequence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn fingerprint(&self) -> String {
        corpus_fingerprint(&self.sentences)
    }
}

pub fn corpus_fingerprint(sentences: &[TokenSequence]) -> String {
    let mut h = ContentHasher::new();
    for s in sentences {
        h.u32s(s.ids());
    }
    h.finish()
}

/// Unlabelled shuffle of several styled corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedCorpus {
    sentences: Vec<TokenSequence>,
    /// `(dimension, label, size)` of every source corpus, in input order.
    pub provenance: Vec<(String, String, usize)>,
}

impl MixedCorpus {
    pub fn sentences(&self) -> &[TokenSequence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn fingerprint(&self) -> String {
        corpus_fingerprint(&self.sentences)
    }
}

/// Concatenate the corpora, drop their labels and shuffle with `seed`.
pub fn mix_corpora(corpora: &[StyledCorpus], seed: u64) -> Result<MixedCorpus> {
    if corpora.is_empty() {
        return Err(Error::Config("mix_corpora needs at least one corpus".into()));
    }
    let mut sentences: Vec<TokenSequence> =
        corpora.iter().flat_map(|c| c.sentences.iter().cloned()).collect();
    // Sorting first makes the result depend only on the multiset of inputs.
    sentences.sort_unstable();
    sentences.shuffle(&mut seeded_rng(seed));
    let provenance = corpora
        .iter()
        .map(|c| (c.dimension.clone(), c.label.clone(), c.len()))
        .collect();
    Ok(MixedCorpus { sentences, provenance })
}

/// Corruption rates for MLM masking and DAE noising.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub p_mask: f64,
    pub mlm_select: f64,
    pub mlm_mask_frac: f64,
    pub mlm_random_frac: f64,
    pub mlm_keep_frac: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p_drop: 0.1,
            p_mask: 0.1,
            mlm_select: 0.15,
            mlm_mask_frac: 0.8,
            mlm_random_frac: 0.1,
            mlm_keep_frac: 0.1,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_drop", self.p_drop),
            ("p_mask", self.p_mask),
            ("mlm_select", self.mlm_select),
            ("mlm_mask_frac", self.mlm_mask_frac),
            ("mlm_random_frac", self.mlm_random_frac),
            ("mlm_keep_frac", self.mlm_keep_frac),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(alloc::format!("{name}={p} is not a probability")));
            }
        }
        let sum = self.mlm_mask_frac + self.mlm_random_frac + self.mlm_keep_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(alloc::format!("MLM action fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// What happened to one MLM-selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// One MLM prediction target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskTarget {
    pub position: usize,
    pub original: u32,
    pub action: MaskAction,
}

/// A corrupted sequence with its MLM prediction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub corrupted: TokenSequence,
    pub targets: Vec<MaskTarget>,
}

/// Select non-special positions with probability `mlm_select` and corrupt
/// each selection by masking, random replacement, or keeping it.
pub fn apply_mlm_mask(
    tokens: &TokenSequence,
    cfg: &NoiseConfig,
    vocab_size: usize,
    rng: &mut Rng,
) -> MaskedExample {
    let mut ids = tokens.ids().to_vec();
    let mut targets = Vec::new();
    let regular = vocab_size.saturating_sub(special::COUNT) as u32;
    for (position, id) in ids.iter_mut().enumerate() {
        if special::is_special(*id) || rng.gen::<f64>() >= cfg.mlm_select {
            continue;
        }
        let original = *id;
        let u: f64 = rng.gen();
        let action = if u < cfg.mlm_mask_frac {
            *id = special::MASK;
            MaskAction::Mask
        } else if u < cfg.mlm_mask_frac + cfg.mlm_random_frac && regular > 0 {
            *id = special::COUNT as u32 + rng.gen_range(0..regular);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        targets.push(MaskTarget { position, original, action });
    }
    MaskedExample { corrupted: TokenSequence::new(ids), targets }
}

/// Drop each non-special token with `p_drop`, then mask each survivor with
/// `p_mask`. Special tokens always survive unchanged.
pub fn apply_dae_noise(tokens: &TokenSequence, cfg: &NoiseConfig, rng: &mut Rng) -> TokenSequence {
    let mut out = Vec::with_capacity(tokens.len());
    for &id in tokens.ids() {
        if special::is_special(id) {
            out.push(id);
            continue;
        }
        if rng.gen::<f64>() < cfg.p_drop {
            continue;
        }
        if rng.gen::<f64>() < cfg.p_mask {
            out.push(special::MASK);
        } else {
            out.push(id);
        }
    }
    TokenSequence::new(out)
}
