use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::lm::{causal_io, head_log_probs, HeadGrad, HeadTarget};
use super::params::ParamSet;
use super::transformer::{
    add_cross, add_lm, body_backward, body_forward, init_params, pack, split_two, BodyRef, CrossIdx, CrossRef, LmIdx,
};
use super::{LanguageModel, TransformerConfig};
use crate::tokenizer::{special, TokenSequence};
use crate::{seeded_rng, Error, Real, Result, Rng};

pub(crate) const ENC: &str = "encoder.";
pub(crate) const DEC: &str = "decoder.";
pub(crate) const CROSS: &str = "cross.";

/// One teacher-forced target: decode `target` from `sources[source]` and
/// weight its negative log-likelihood by `weight`.
#[derive(Clone, Copy, Debug)]
pub struct Seq2SeqItem<'a> {
    pub source: usize,
    pub target: &'a TokenSequence,
    pub weight: f64,
}

/// Bidirectional encoder and causal decoder joined by per-layer
/// cross-attention. All parameters live in one flat set with `encoder.`,
/// `decoder.` and `cross.` name prefixes.
#[derive(Clone, Debug)]
pub struct EncoderDecoder<T = f32> {
    config: TransformerConfig,
    params: ParamSet<T>,
    enc: LmIdx,
    dec: LmIdx,
    cross: Vec<CrossIdx>,
    banned: Vec<bool>,
}

/// The decoder never emits padding, BOS, mask or unknown tokens.
pub(crate) fn banned_outputs(vocab_size: usize) -> Vec<bool> {
    (0..vocab_size as u32)
        .map(|id| matches!(id, special::PAD | special::BOS | special::MASK | special::UNK))
        .collect()
}

impl<T: Real> EncoderDecoder<T> {
    pub fn zeros(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut b = ParamSet::<T>::builder();
        let enc = add_lm(&mut b, ENC, &config);
        let dec = add_lm(&mut b, DEC, &config);
        let cross = add_cross(&mut b, CROSS, &config);
        Ok(Self { config, params: b.finish(), enc, dec, cross, banned: banned_outputs(config.vocab_size) })
    }

    /// Every parameter freshly initialized.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        init_params(&mut m.params, "", &mut seeded_rng(seed));
        Ok(m)
    }

    /// Encoder weights come from `encoder_src`, decoder weights from
    /// `decoder_src`; cross-attention is freshly initialized from `seed`.
    pub fn build(encoder_src: &LanguageModel<T>, decoder_src: &LanguageModel<T>, seed: u64) -> Result<Self> {
        if encoder_src.config() != decoder_src.config() {
            return Err(Error::Incompatible(alloc::format!(
                "encoder config {:?} differs from decoder config {:?}",
                encoder_src.config(),
                decoder_src.config()
            )));
        }
        let mut m = Self::zeros(*encoder_src.config())?;
        for (prefix, lm) in [(ENC, encoder_src), (DEC, decoder_src)] {
            let src = lm.params();
            for spec in src.specs() {
                let name = alloc::format!("{prefix}{}", spec.name);
                m.params.get_mut(&name).expect("layouts agree").copy_from_slice(spec.slot.of(src.data()));
            }
        }
        init_params(&mut m.params, CROSS, &mut seeded_rng(seed));
        Ok(m)
    }

    /// Restrict what the decoder may emit to `allowed` ids.
    pub fn with_output_support(mut self, allowed: &[u32]) -> Result<Self> {
        let v = self.config.vocab_size;
        if allowed.is_empty() {
            return Err(Error::Config("output support is empty".into()));
        }
        let mut banned = vec![true; v];
        for &id in allowed {
            if id as usize >= v {
                return Err(Error::InvalidToken { id, vocab_size: v });
            }
            banned[id as usize] = false;
        }
        self.banned = banned;
        Ok(self)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn cast<U: Real>(&self) -> EncoderDecoder<U> {
        EncoderDecoder {
            config: self.config,
            params: self.params.cast(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            cross: self.cross.clone(),
            banned: self.banned.clone(),
        }
    }

    /// Ids the decoder assigns zero probability.
    pub fn banned_outputs(&self) -> &[bool] {
        &self.banned
    }

    pub(crate) fn encoder_body(&self) -> BodyRef<'_, T> {
        BodyRef { cfg: &self.config, params: self.params.data(), idx: &self.enc, causal: false }
    }

    pub(crate) fn decoder_body(&self) -> BodyRef<'_, T> {
        BodyRef { cfg: &self.config, params: self.params.data(), idx: &self.dec, causal: true }
    }

    pub(crate) fn cross_idx(&self) -> &[CrossIdx] {
        &self.cross
    }

    fn run(
        &self,
        sources: &[TokenSequence],
        items: &[Seq2SeqItem<'_>],
        grad: bool,
        mut dropout: Option<&mut Rng>,
    ) -> Result<(Vec<T>, Option<Vec<T>>)> {
        if sources.is_empty() || items.is_empty() {
            return Err(Error::DegenerateBatch);
        }
        let v = self.config.vocab_size;
        let d = self.config.hidden_size;
        for s in sources {
            s.validate(v)?;
        }
        let mut src_of = Vec::with_capacity(items.len());
        for it in items {
            if it.source >= sources.len() {
                return Err(Error::Config(alloc::format!("item refers to missing source {}", it.source)));
            }
            if it.target.scored().is_empty() {
                return Err(Error::DegenerateInput("empty decoder target"));
            }
            it.target.validate(v)?;
            src_of.push(it.source);
        }

        let (enc_tokens, mem_segs) = pack(sources.iter().map(|s| s.ids()));
        let enc_body = self.encoder_body();
        let enc_cache = body_forward(&enc_body, &enc_tokens, &mem_segs, None, dropout.as_deref_mut())?;

        let io: Vec<_> = items.iter().map(|it| causal_io(it.target)).collect();
        let (dec_tokens, segs) = pack(io.iter().map(|(i, _)| i.as_slice()));
        let mut targets = Vec::with_capacity(dec_tokens.len());
        for ((it, (_, scored)), seg) in items.iter().zip(&io).zip(&segs) {
            for (t, &id) in scored.iter().enumerate() {
                targets.push(HeadTarget { row: seg.start + t, id, weight: it.weight });
            }
        }
        let dec_body = self.decoder_body();
        let p = self.params.data();
        let cross = CrossRef {
            params: p,
            idx: &self.cross,
            memory: enc_cache.hidden(),
            mem_segs: &mem_segs,
            src_of: &src_of,
        };
        let dec_cache = body_forward(&dec_body, &dec_tokens, &segs, Some(&cross), dropout)?;
        let emb = self.dec.tok_emb.of(p);
        let bias = self.dec.head_bias.of(p);

        let mut g = None;
        let lp = if grad {
            let mut gbuf = self.params.zeros_like();
            let mut d_hidden = vec![T::zero(); dec_tokens.len() * d];
            let lp = {
                let (d_emb, d_bias) = split_two(&mut gbuf, self.dec.tok_emb, self.dec.head_bias);
                let hg = HeadGrad { d_hidden: &mut d_hidden, d_emb, d_bias };
                head_log_probs(dec_cache.hidden(), d, emb, bias, &targets, Some(&self.banned), Some(hg))
            };
            let mut d_memory = vec![T::zero(); enc_tokens.len() * d];
            body_backward(&dec_body, &dec_cache, &d_hidden, &mut gbuf, Some((&cross, &mut d_memory)));
            body_backward(&enc_body, &enc_cache, &d_memory, &mut gbuf, None);
            g = Some(gbuf);
            lp
        } else {
            head_log_probs(dec_cache.hidden(), d, emb, bias, &targets, Some(&self.banned), None)
        };

        let mut per_item = Vec::with_capacity(items.len());
        let mut it = lp.into_iter();
        for (_, scored) in &io {
            per_item.push(it.by_ref().take(scored.len()).sum());
        }
        Ok((per_item, g))
    }

    /// `log P(target | source)` for every item.
    pub fn log_probs(&self, sources: &[TokenSequence], items: &[Seq2SeqItem<'_>]) -> Result<Vec<T>> {
        Ok(self.run(sources, items, false, None)?.0)
    }

    /// Per-item `log P(target | source)` and the gradient of
    /// `Σ weight × (−log P)`. Dropout is active when an RNG is supplied.
    pub fn weighted_nll_grad(
        &self,
        sources: &[TokenSequence],
        items: &[Seq2SeqItem<'_>],
        dropout: Option<&mut Rng>,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let (lp, g) = self.run(sources, items, true, dropout)?;
        Ok((lp, g.unwrap()))
    }

    /// Denoising loss: `−log P(original | noisy)` summed over tokens and
    /// averaged over the batch.
    pub fn dae_loss(&self, noisy: &[TokenSequence], clean: &[TokenSequence]) -> Result<T> {
        if noisy.len() != clean.len() {
            return Err(Error::Config(alloc::format!("{} noisy vs {} clean sentences", noisy.len(), clean.len())));
        }
        let w = 1.0 / clean.len().max(1) as f64;
        let items: Vec<_> =
            clean.iter().enumerate().map(|(i, x)| Seq2SeqItem { source: i, target: x, weight: w }).collect();
        let lp = self.log_probs(noisy, &items)?;
        Ok(-lp.iter().copied().sum::<T>() * T::of(w))
    }
}
