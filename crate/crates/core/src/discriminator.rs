//! Style discriminators: causal LMs fine-tuned on one style whose sequence
//! log-probability serves as that style's reward.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;

use crate::corpus::{MixedCorpus, StyledCorpus};
use crate::model::{clip_grad_norm, warmup_lr, Adam, AdamConfig, AttentionMode, LanguageModel};
use crate::tokenizer::TokenSequence;
use crate::{seeded_rng, Error, Real, Result};

/// Label recorded for discriminators trained on an unlabelled mixture.
pub const MIXTURE: &str = "mixture";

/// A frozen causal LM tied to one style label.
#[derive(Clone, Debug)]
pub struct StyleDiscriminator<T = f32> {
    pub lm: LanguageModel<T>,
    pub dimension: String,
    pub label: String,
    pub base_fingerprint: String,
    pub corpus_fingerprint: String,
}

impl<T: Real> StyleDiscriminator<T> {
    /// Wrap an already fine-tuned model (e.g. one loaded from disk).
    pub fn from_parts(
        lm: LanguageModel<T>,
        dimension: &str,
        label: &str,
        base_fingerprint: &str,
        corpus_fingerprint: &str,
    ) -> Result<Self> {
        if lm.mode() != AttentionMode::Causal {
            return Err(Error::Mode { expected: AttentionMode::Causal.name() });
        }
        Ok(Self {
            lm,
            dimension: dimension.into(),
            label: label.into(),
            base_fingerprint: base_fingerprint.into(),
            corpus_fingerprint: corpus_fingerprint.into(),
        })
    }

    pub fn perplexity(&self, corpus: &[TokenSequence]) -> Result<f64> {
        perplexity(&self.lm, corpus)
    }

    /// Sequence log-probability under this style's LM.
    pub fn reward(&self, tokens: &TokenSequence) -> Result<f64> {
        Ok(self.lm.sequence_log_prob(tokens)?.f64())
    }
}

/// Training data for a discriminator: one style corpus, or the unlabelled
/// mixture used to initialize the transfer decoder.
#[derive(Clone, Copy, Debug)]
pub enum DiscriminatorCorpus<'a> {
    Styled(&'a StyledCorpus),
    Mixed(&'a MixedCorpus),
}

impl DiscriminatorCorpus<'_> {
    pub fn sentences(&self) -> &[TokenSequence] {
        match self {
            Self::Styled(c) => c.sentences(),
            Self::Mixed(c) => c.sentences(),
        }
    }

    pub fn dimension(&self) -> &str {
        match self {
            Self::Styled(c) => &c.dimension,
            Self::Mixed(_) => MIXTURE,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Self::Styled(c) => &c.label,
            Self::Mixed(_) => MIXTURE,
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            Self::Styled(c) => c.fingerprint(),
            Self::Mixed(c) => c.fingerprint(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Hard cap on updates across all epochs; `None` runs every epoch fully.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    /// Share of the corpus held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            max_steps: None,
            batch_size: 32,
            adam: AdamConfig { lr: 3e-4, ..Default::default() },
            warmup_steps: 20,
            clip_norm: 1.0,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    /// Mean next-token loss on a fixed probe of the training split, before
    /// and after fine-tuning.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Validation perplexity after each completed epoch.
    pub val_perplexity: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

const PROBE: usize = 256;

/// Fine-tune `base` with the next-token loss on `corpus`. The best epoch by
/// validation perplexity is kept; training stops at the first epoch that
/// fails to improve on it.
pub fn finetune_discriminator<T: Real>(
    base: &LanguageModel<T>,
    corpus: DiscriminatorCorpus<'_>,
    cfg: &FinetuneConfig,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<(StyleDiscriminator<T>, FinetuneReport)> {
    let all = corpus.sentences();
    if all.is_empty() {
        return Err(Error::Config("discriminator corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config(alloc::format!("val_fraction {} outside [0, 1)", cfg.val_fraction)));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if all.len() >= 2 { ((all.len() as f64 * cfg.val_fraction) as usize).min(all.len() - 1) } else { 0 };
    let val: Vec<TokenSequence> = order[..n_val].iter().map(|&i| all[i].clone()).collect();
    let train: Vec<TokenSequence> = order[n_val..].iter().map(|&i| all[i].clone()).collect();
    let probe = &train[..train.len().min(PROBE)];

    let mut lm = base.with_mode(AttentionMode::Causal);
    let initial_loss = mean_loss(&lm, probe)?;
    let mut opt = Adam::new(cfg.adam, lm.param_count());
    let mut best: Option<(f64, LanguageModel<T>, usize)> = None;
    let mut val_perplexity = Vec::new();
    let mut steps = 0;
    let cap = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size) {
            if steps >= cap {
                break;
            }
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, mut grad) = lm.clm_loss_grad(&batch, Some(&mut rng))?;
            let loss = loss.f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { step: steps, loss, initial: initial_loss });
            }
            clip_grad_norm(&mut grad, cfg.clip_norm);
            opt.step_lr(lm.params_mut().data_mut(), &grad, warmup_lr(cfg.adam.lr, cfg.warmup_steps, steps));
            steps += 1;
            observer(steps, loss);
        }
        if val.is_empty() {
            if steps >= cap {
                break;
            }
            continue;
        }
        let ppl = perplexity(&lm, &val)?;
        val_perplexity.push(ppl);
        match &best {
            Some((b, _, _)) if ppl >= *b => break 'epochs,
            _ => best = Some((ppl, lm.clone(), epoch)),
        }
        if steps >= cap {
            break;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.2);
    if let Some((_, m, _)) = best {
        lm = m;
    }
    let final_loss = mean_loss(&lm, probe)?;
    let disc = StyleDiscriminator {
        lm,
        dimension: corpus.dimension().into(),
        label: corpus.label().into(),
        base_fingerprint: base.fingerprint(),
        corpus_fingerprint: corpus.fingerprint(),
    };
    Ok((disc, FinetuneReport { initial_loss, final_loss, val_perplexity, best_epoch, steps }))
}

fn mean_loss<T: Real>(lm: &LanguageModel<T>, corpus: &[TokenSequence]) -> Result<f64> {
    let (ll, n) = lm.corpus_log_likelihood(corpus)?;
    Ok(-ll / n as f64)
}

/// `exp` of the token-weighted mean negative log-likelihood over `corpus`.
pub fn perplexity<T: Real>(lm: &LanguageModel<T>, corpus: &[TokenSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Config("perplexity of an empty corpus".into()));
    }
    Ok(Float::exp(mean_loss(lm, corpus)?))
}

/// Reward of `tokens` under `disc`, optionally divided by the number of
/// scored tokens.
pub fn style_reward<T: Real>(disc: &StyleDiscriminator<T>, tokens: &TokenSequence, length_normalize: bool) -> Result<f64> {
    let r = disc.reward(tokens)?;
    Ok(if length_normalize { r / tokens.scored().len() as f64 } else { r })
}
