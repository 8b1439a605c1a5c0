use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};

use super::transformer::{body_forward, IncrementalState};
use super::encdec::banned_outputs;
use super::{AttentionMode, EncoderDecoder, LanguageModel};
use crate::tokenizer::{special, TokenSequence};
use crate::{Error, Real, Result, Rng};

/// How the decoder picks each next token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

impl<T: Real> EncoderDecoder<T> {
    /// Decode a rewrite of `source` token by token. The result has no BOS,
    /// at most `max_len` tokens (capped by the position table) and ends with
    /// EOS unless the cap was hit first.
    pub fn generate(
        &self,
        source: &TokenSequence,
        max_len: usize,
        decoding: Decoding,
        rng: &mut Rng,
    ) -> Result<TokenSequence> {
        if let Decoding::Sample { temperature } = decoding {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(alloc::format!("temperature {temperature} must be positive")));
            }
        }
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        source.validate(self.config().vocab_size)?;
        let max_len = max_len.min(self.config().max_positions);
        let enc = self.encoder_body();
        let seg = super::Segment { start: 0, len: source.len() };
        let cache = body_forward(&enc, source.ids(), &[seg], None, None)?;
        let dec = self.decoder_body();
        let p = self.params().data();
        let mut state = IncrementalState::new(&dec, Some((p, self.cross_idx(), cache.hidden())));
        let banned = self.banned_outputs();
        let mut out = Vec::with_capacity(max_len);
        let mut token = special::BOS;
        while out.len() < max_len {
            let logits = state.step(&dec, Some((p, self.cross_idx())), token);
            token = match decoding {
                Decoding::Greedy => argmax_allowed(&logits, banned),
                Decoding::Sample { temperature } => sample_allowed(&logits, banned, temperature, rng),
            };
            out.push(token);
            if token == special::EOS {
                break;
            }
        }
        Ok(TokenSequence::new(out))
    }
}

impl<T: Real> LanguageModel<T> {
    /// Unconditional sample starting from BOS, with the same output support
    /// as the encoder-decoder. Requires a causal model.
    pub fn sample(&self, max_len: usize, temperature: f64, rng: &mut Rng) -> Result<TokenSequence> {
        if self.mode() != AttentionMode::Causal {
            return Err(Error::Mode { expected: AttentionMode::Causal.name() });
        }
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let banned = banned_outputs(self.config().vocab_size);
        let body = self.body();
        let mut state = IncrementalState::new(&body, None);
        let mut out = Vec::new();
        let mut token = special::BOS;
        while out.len() < max_len.min(self.config().max_positions) {
            let logits = state.step(&body, None, token);
            token = sample_allowed(&logits, &banned, temperature, rng);
            out.push(token);
            if token == special::EOS {
                break;
            }
        }
        Ok(TokenSequence::new(out))
    }
}

fn argmax_allowed<T: Real>(logits: &[T], banned: &[bool]) -> u32 {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, &v) in logits.iter().enumerate() {
        if !banned[i] && v > best_v {
            best = i;
            best_v = v;
        }
    }
    best as u32
}

fn sample_allowed<T: Real>(logits: &[T], banned: &[bool], temperature: f64, rng: &mut Rng) -> u32 {
    let max = logits
        .iter()
        .zip(banned)
        .filter(|(_, &b)| !b)
        .map(|(v, _)| v.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights = logits
        .iter()
        .zip(banned)
        .map(|(v, &b)| if b { 0.0 } else { num_traits::Float::exp((v.f64() - max) / temperature) });
    let dist = WeightedIndex::new(weights).expect("at least one allowed token");
    dist.sample(rng) as u32
}
