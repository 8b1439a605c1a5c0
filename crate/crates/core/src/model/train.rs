use alloc::vec::Vec;

use rand::Rng as _;

use super::{clip_grad_norm, Adam, AttentionMode, LanguageModel};
use crate::corpus::{apply_mlm_mask, NoiseConfig};
use crate::tokenizer::TokenSequence;
use crate::{seeded_rng, Error, Real, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 3e-4,
            warmup_steps: 50,
            clip_norm: 1.0,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Loss of every step run by this call, in order.
    pub losses: Vec<f64>,
    /// Step counter after the last update.
    pub step: usize,
}

/// Learning rate with linear warmup from zero.
pub fn warmup_lr(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

/// Multiplier that falls linearly from 1 at step 0 to 0 at `total`.
pub fn linear_decay(step: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        1.0 - step.min(total) as f64 / total as f64
    }
}

/// Per-step RNG so a resumed run replays exactly the batches and noise an
/// uninterrupted run would have used.
pub fn step_rng(seed: u64, step: usize) -> Rng {
    seeded_rng(seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Steps in the moving windows the divergence guard compares.
pub const DIVERGENCE_WINDOW: usize = 20;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Watches a loss stream and flags divergence once the recent mean exceeds
/// `factor ×` the mean of the first window, or a loss goes non-finite.
#[derive(Clone, Debug, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    first: Vec<f64>,
    recent: Vec<f64>,
}

impl DivergenceGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn initial(&self) -> Option<f64> {
        self.initial
    }

    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = self.initial.unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss, initial });
        }
        if self.initial.is_none() {
            self.first.push(loss);
            if self.first.len() == DIVERGENCE_WINDOW {
                self.initial = Some(self.first.iter().sum::<f64>() / DIVERGENCE_WINDOW as f64);
            }
        }
        self.recent.push(loss);
        if self.recent.len() > DIVERGENCE_WINDOW {
            self.recent.remove(0);
        }
        if let Some(init) = self.initial {
            let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
            if mean > DIVERGENCE_FACTOR * init {
                return Err(Error::Divergence { step, loss: mean, initial: init });
            }
        }
        Ok(())
    }
}

/// Masked-LM pretraining from step `start_step` to `cfg.steps`. The
/// observer sees `(step, loss)` after every update.
pub fn pretrain_mlm<T: Real>(
    model: &mut LanguageModel<T>,
    opt: &mut Adam<T>,
    corpus: &[TokenSequence],
    cfg: &PretrainConfig,
    start_step: usize,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<PretrainReport> {
    if model.mode() != AttentionMode::Bidirectional {
        return Err(Error::Mode { expected: AttentionMode::Bidirectional.name() });
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    cfg.noise.validate()?;
    let v = model.config().vocab_size;
    let mut guard = DivergenceGuard::new();
    let mut losses = Vec::new();
    let mut step = start_step;
    while step < cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|_| {
                let s = &corpus[rng.gen_range(0..corpus.len())];
                apply_mlm_mask(s, &cfg.noise, v, &mut rng)
            })
            .collect();
        let (loss, mut grad) = match model.mlm_loss_grad(&batch, Some(&mut rng)) {
            Err(Error::DegenerateBatch) => {
                step += 1;
                continue;
            }
            r => r?,
        };
        let loss = loss.f64();
        guard.observe(step, loss)?;
        clip_grad_norm(&mut grad, cfg.clip_norm);
        opt.step_lr(model.params_mut().data_mut(), &grad, warmup_lr(cfg.lr, cfg.warmup_steps, step));
        losses.push(loss);
        step += 1;
        observer(step, loss);
    }
    Ok(PretrainReport { losses, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdamConfig, TransformerConfig};

    #[test]
    fn schedules() {
        assert_eq!(warmup_lr(1.0, 4, 0), 0.25);
        assert_eq!(warmup_lr(1.0, 4, 9), 1.0);
        assert_eq!(linear_decay(0, 10), 1.0);
        assert_eq!(linear_decay(5, 10), 0.5);
        assert_eq!(linear_decay(12, 10), 0.0);
    }

    #[test]
    fn guard_trips_on_blowup_and_nan() {
        let mut g = DivergenceGuard::new();
        for s in 0..DIVERGENCE_WINDOW {
            g.observe(s, 1.0).unwrap();
        }
        assert!(g.observe(100, f64::NAN).is_err());
        let mut g = DivergenceGuard::new();
        for s in 0..DIVERGENCE_WINDOW {
            g.observe(s, 1.0).unwrap();
        }
        let mut tripped = false;
        for s in 0..DIVERGENCE_WINDOW {
            tripped |= g.observe(s + 50, 1e3).is_err();
        }
        assert!(tripped);
    }

    #[test]
    fn resume_replays_the_uninterrupted_run() {
        let cfg_m = TransformerConfig { num_layers: 1, hidden_size: 8, num_heads: 2, dropout: 0.1, max_positions: 12, vocab_size: 12 };
        let corpus: Vec<_> = (0..10u32).map(|i| TokenSequence::framed(&[5 + i % 7, 6, 7 + i % 3])).collect();
        let cfg = PretrainConfig { steps: 6, batch_size: 4, lr: 1e-2, warmup_steps: 0, ..Default::default() };
        let base = LanguageModel::<f64>::new(cfg_m, AttentionMode::Bidirectional, 1).unwrap();
        let ac = AdamConfig::default();

        let mut full = base.clone();
        let mut opt = Adam::new(ac, full.param_count());
        pretrain_mlm(&mut full, &mut opt, &corpus, &cfg, 0, &mut |_, _| {}).unwrap();

        let mut half = base.clone();
        let mut opt2 = Adam::new(ac, half.param_count());
        let first = PretrainConfig { steps: 3, ..cfg };
        let r = pretrain_mlm(&mut half, &mut opt2, &corpus, &first, 0, &mut |_, _| {}).unwrap();
        assert_eq!(r.step, 3);
        let r = pretrain_mlm(&mut half, &mut opt2, &corpus, &cfg, 3, &mut |_, _| {}).unwrap();
        assert_eq!(r.step, 6);
        assert_eq!(full.params(), half.params());
    }
}
