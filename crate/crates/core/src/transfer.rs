//! Joint training of the generator: denoising reconstruction plus one
//! REINFORCE term per target style, each rewarded by a frozen discriminator.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::corpus::{apply_dae_noise, MixedCorpus, NoiseConfig};
use crate::discriminator::{style_reward, StyleDiscriminator};
use crate::model::{
    clip_grad_norm, linear_decay, step_rng, warmup_lr, Adam, AdamConfig, Decoding, DivergenceGuard, EncoderDecoder, Seq2SeqItem,
};
use crate::tokenizer::{TokenSequence, Tokenizer};
use crate::{seeded_rng, Error, Real, Result, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub lambda_dae: f64,
    /// One weight per discriminator, in discriminator order.
    pub lambdas: Vec<f64>,
    pub sample_temperature: f64,
    pub max_len: usize,
    pub reward_length_normalize: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
    /// Corruption applied before greedy decoding at inference time.
    pub inference_noise: NoiseConfig,
    pub adam: AdamConfig,
    pub warmup_steps: usize,
    /// Decay the learning rate linearly to zero at `steps`.
    pub lr_decay: bool,
    pub clip_norm: f64,
    /// Transferred samples copied into each trace row.
    pub trace_samples: usize,
    /// Leading steps trained on reconstruction alone, so the generator can
    /// copy before any style reward is applied.
    pub dae_warmup_steps: usize,
}

impl TransferConfig {
    pub fn new(lambdas: Vec<f64>) -> Self {
        Self {
            lambda_dae: 1.0,
            lambdas,
            sample_temperature: 1.0,
            max_len: 64,
            reward_length_normalize: false,
            steps: 1000,
            batch_size: 16,
            seed: 0,
            noise: NoiseConfig::default(),
            inference_noise: NoiseConfig { p_drop: 0.0, p_mask: 0.1, ..NoiseConfig::default() },
            adam: AdamConfig { lr: 1e-4, ..Default::default() },
            warmup_steps: 0,
            lr_decay: false,
            clip_norm: 1.0,
            trace_samples: 1,
            dae_warmup_steps: 0,
        }
    }

    pub fn validate(&self, num_discriminators: usize) -> Result<()> {
        if self.lambdas.len() != num_discriminators {
            return Err(Error::Config(alloc::format!(
                "{} style weights for {} discriminators",
                self.lambdas.len(),
                num_discriminators
            )));
        }
        let all = core::iter::once(&self.lambda_dae).chain(&self.lambdas);
        if all.clone().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if all.clone().all(|&l| l == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.sample_temperature > 0.0 && self.sample_temperature.is_finite()) {
            return Err(Error::Config("sample_temperature must be positive".into()));
        }
        if self.max_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_len and batch_size must be at least 1".into()));
        }
        self.noise.validate()?;
        self.inference_noise.validate()
    }
}

/// Rewards behind one REINFORCE term.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardRecord {
    pub label: String,
    /// `r(x)`, the baseline.
    pub r_input: f64,
    /// `r(x′)`.
    pub r_sample: f64,
    pub advantage: f64,
}

impl RewardRecord {
    fn new(label: &str, r_input: f64, r_sample: f64) -> Self {
        Self { label: label.into(), r_input, r_sample, advantage: r_sample - r_input }
    }
}

/// A sampled rewrite and what the discriminator thought of it.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSample {
    pub sample: TokenSequence,
    pub record: RewardRecord,
    /// `log P(x′ | x̃)` under the generator.
    pub log_prob: f64,
    /// `advantage × (−log P(x′ | x̃))`.
    pub loss: f64,
}

/// Draw `x′` for `x_noisy`, retrying once if the draw has no content.
fn draw<T: Real>(encdec: &EncoderDecoder<T>, x_noisy: &TokenSequence, cfg: &TransferConfig, rng: &mut Rng) -> Result<TokenSequence> {
    let decoding = Decoding::Sample { temperature: cfg.sample_temperature };
    for _ in 0..2 {
        let s = encdec.generate(x_noisy, cfg.max_len, decoding, rng)?;
        if !s.content().is_empty() {
            return Ok(s);
        }
    }
    Err(Error::DegenerateSample)
}

/// One REINFORCE term for one sentence: sample `x′ ~ P(· | x̃)`, reward it
/// against `r(x)` and weight the sample's negative log-likelihood by the
/// advantage.
pub fn reinforce_style_loss<T: Real>(
    encdec: &EncoderDecoder<T>,
    disc: &StyleDiscriminator<T>,
    x: &TokenSequence,
    x_noisy: &TokenSequence,
    cfg: &TransferConfig,
    rng: &mut Rng,
) -> Result<StyleSample> {
    let sample = draw(encdec, x_noisy, cfg, rng)?;
    score_sample(encdec, disc, x, x_noisy, sample, cfg.reward_length_normalize)
}

/// Reward and loss for a given `x′`.
pub fn score_sample<T: Real>(
    encdec: &EncoderDecoder<T>,
    disc: &StyleDiscriminator<T>,
    x: &TokenSequence,
    x_noisy: &TokenSequence,
    sample: TokenSequence,
    length_normalize: bool,
) -> Result<StyleSample> {
    let record = RewardRecord::new(
        &disc.label,
        style_reward(disc, x, length_normalize)?,
        style_reward(disc, &sample, length_normalize)?,
    );
    let item = Seq2SeqItem { source: 0, target: &sample, weight: 1.0 };
    let log_prob = encdec.log_probs(core::slice::from_ref(x_noisy), &[item])?[0].f64();
    let loss = record.advantage * -log_prob;
    Ok(StyleSample { sample, record, log_prob, loss })
}

/// Gradient of a REINFORCE term with the advantage held constant:
/// `advantage × ∇(−log P(x′ | x̃))`.
pub fn reinforce_gradient<T: Real>(encdec: &EncoderDecoder<T>, x_noisy: &TokenSequence, s: &StyleSample) -> Result<Vec<T>> {
    let item = Seq2SeqItem { source: 0, target: &s.sample, weight: s.record.advantage };
    Ok(encdec.weighted_nll_grad(core::slice::from_ref(x_noisy), &[item], None)?.1)
}

/// Everything logged for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub l_dae: f64,
    /// `L^{s_i}` per discriminator.
    pub l_styles: Vec<f64>,
    pub total: f64,
    pub mean_advantages: Vec<f64>,
    /// Sentences whose sample was dropped as degenerate.
    pub dropped: usize,
    pub samples: Vec<TokenSequence>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

struct BatchLoss<T> {
    row: TraceRow,
    grad: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
fn batch_loss<T: Real>(
    encdec: &EncoderDecoder<T>,
    discs: &[StyleDiscriminator<T>],
    xs: &[TokenSequence],
    noisy: &[TokenSequence],
    cfg: &TransferConfig,
    rng: &mut Rng,
    grad: bool,
    dropout: bool,
) -> Result<BatchLoss<T>> {
    cfg.validate(discs.len())?;
    if xs.is_empty() || xs.len() != noisy.len() {
        return Err(Error::Config(alloc::format!("{} inputs vs {} noisy inputs", xs.len(), noisy.len())));
    }
    let b = xs.len() as f64;
    let k = discs.len();
    let styles_on = cfg.lambdas.iter().any(|&l| l > 0.0);

    let mut samples: Vec<Option<TokenSequence>> = vec![None; xs.len()];
    let mut advantages = vec![vec![0.0; k]; xs.len()];
    let mut dropped = 0;
    if styles_on {
        for (i, xn) in noisy.iter().enumerate() {
            match draw(encdec, xn, cfg, rng) {
                Ok(s) => {
                    for (j, d) in discs.iter().enumerate() {
                        let r_in = style_reward(d, &xs[i], cfg.reward_length_normalize)?;
                        let r_out = style_reward(d, &s, cfg.reward_length_normalize)?;
                        advantages[i][j] = RewardRecord::new(&d.label, r_in, r_out).advantage;
                    }
                    samples[i] = Some(s);
                }
                Err(Error::DegenerateSample) => dropped += 1,
                Err(e) => return Err(e),
            }
        }
    }

    let mut items = Vec::with_capacity(2 * xs.len());
    for (i, x) in xs.iter().enumerate() {
        items.push(Seq2SeqItem { source: i, target: x, weight: cfg.lambda_dae / b });
    }
    let mut sample_of = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(s) = s {
            let w: f64 = cfg.lambdas.iter().zip(&advantages[i]).map(|(l, a)| l * a).sum::<f64>() / b;
            sample_of.push(i);
            items.push(Seq2SeqItem { source: i, target: s, weight: w });
        }
    }
    let mut drop_rng = dropout.then(|| seeded_rng(rng.gen()));
    let (lp, g) = if grad {
        let (lp, g) = encdec.weighted_nll_grad(noisy, &items, drop_rng.as_mut())?;
        (lp, Some(g))
    } else {
        (encdec.log_probs(noisy, &items)?, None)
    };

    let l_dae = -lp[..xs.len()].iter().map(|v| v.f64()).sum::<f64>() / b;
    let mut l_styles = vec![0.0; k];
    let mut mean_advantages = vec![0.0; k];
    for (slot, &i) in sample_of.iter().enumerate() {
        let nll = -lp[xs.len() + slot].f64();
        for j in 0..k {
            l_styles[j] += advantages[i][j] * nll / b;
            mean_advantages[j] += advantages[i][j] / sample_of.len() as f64;
        }
    }
    let total = cfg.lambda_dae * l_dae + cfg.lambdas.iter().zip(&l_styles).map(|(l, s)| l * s).sum::<f64>();
    let row = TraceRow {
        step: 0,
        l_dae,
        l_styles,
        total,
        mean_advantages,
        dropped,
        samples: samples.iter().flatten().take(cfg.trace_samples).cloned().collect(),
    };
    Ok(BatchLoss { row, grad: g })
}

/// `λ_DAE·L_DAE + Σ λ_i·L^{s_i}` over a batch, with every component logged.
/// One `x′` is drawn per sentence and rewarded by every discriminator.
pub fn total_loss<T: Real>(
    encdec: &EncoderDecoder<T>,
    discs: &[StyleDiscriminator<T>],
    xs: &[TokenSequence],
    noisy: &[TokenSequence],
    cfg: &TransferConfig,
    rng: &mut Rng,
) -> Result<(f64, TraceRow)> {
    let r = batch_loss(encdec, discs, xs, noisy, cfg, rng, false, false)?;
    Ok((r.row.total, r.row))
}

/// [`total_loss`] and its gradient with advantages held constant.
pub fn total_loss_grad<T: Real>(
    encdec: &EncoderDecoder<T>,
    discs: &[StyleDiscriminator<T>],
    xs: &[TokenSequence],
    noisy: &[TokenSequence],
    cfg: &TransferConfig,
    rng: &mut Rng,
) -> Result<(TraceRow, Vec<T>)> {
    let r = batch_loss(encdec, discs, xs, noisy, cfg, rng, true, false)?;
    Ok((r.row, r.grad.unwrap()))
}

/// Mini-batch training on the unlabelled mixture from `start_step` to
/// `cfg.steps`. The callback runs after every update and may persist state.
pub fn train_transfer<T: Real>(
    encdec: &mut EncoderDecoder<T>,
    opt: &mut Adam<T>,
    discs: &[StyleDiscriminator<T>],
    mixed: &MixedCorpus,
    cfg: &TransferConfig,
    start_step: usize,
    on_step: &mut dyn FnMut(&TraceRow, &EncoderDecoder<T>, &Adam<T>) -> Result<()>,
) -> Result<TrainingTrace> {
    cfg.validate(discs.len())?;
    let corpus = mixed.sentences();
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.dae_warmup_steps > start_step && cfg.lambda_dae == 0.0 {
        return Err(Error::Config("reconstruction warmup needs a positive lambda_dae".into()));
    }
    let warm = TransferConfig { lambdas: vec![0.0; cfg.lambdas.len()], ..cfg.clone() };
    let mut guard = DivergenceGuard::new();
    let mut trace = TrainingTrace::default();
    for step in start_step..cfg.steps {
        let active = if step < cfg.dae_warmup_steps { &warm } else { cfg };
        let mut rng = step_rng(cfg.seed, step);
        let xs: Vec<TokenSequence> =
            (0..cfg.batch_size).map(|_| corpus[rng.gen_range(0..corpus.len())].clone()).collect();
        let noisy: Vec<TokenSequence> = xs.iter().map(|x| apply_dae_noise(x, &cfg.noise, &mut rng)).collect();
        let r = batch_loss(encdec, discs, &xs, &noisy, active, &mut rng, true, true)?;
        let mut row = r.row;
        row.step = step + 1;
        if !row.total.is_finite() {
            return Err(Error::Divergence { step, loss: row.total, initial: guard.initial().unwrap_or(f64::NAN) });
        }
        guard.observe(step, row.l_dae)?;
        let mut grad = r.grad.unwrap();
        clip_grad_norm(&mut grad, cfg.clip_norm);
        let mut lr = warmup_lr(cfg.adam.lr, cfg.warmup_steps, step);
        if cfg.lr_decay {
            lr *= linear_decay(step, cfg.steps);
        }
        opt.step_lr(encdec.params_mut().data_mut(), &grad, lr);
        on_step(&row, encdec, opt)?;
        trace.rows.push(row);
    }
    Ok(trace)
}

/// Rewrite one sentence: encode, lightly mask, decode greedily.
pub fn transfer<T: Real>(encdec: &EncoderDecoder<T>, sentence: &str, tokenizer: &Tokenizer, cfg: &TransferConfig) -> Result<String> {
    let x = tokenizer.encode_framed(sentence, encdec.config().max_positions);
    if x.content().is_empty() {
        return Err(Error::DegenerateInput("empty input sentence"));
    }
    let out = transfer_tokens(encdec, &x, cfg)?;
    tokenizer.decode(&out)
}

/// [`transfer`] on token ids.
pub fn transfer_tokens<T: Real>(encdec: &EncoderDecoder<T>, x: &TokenSequence, cfg: &TransferConfig) -> Result<TokenSequence> {
    let mut rng = seeded_rng(cfg.seed);
    let noisy = apply_dae_noise(x, &cfg.inference_noise, &mut rng);
    encdec.generate(&noisy, cfg.max_len, Decoding::Greedy, &mut rng)
}

/// Every combination of per-style weights drawn from `values`.
pub fn lambda_grid(values: &[f64], styles: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..styles {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

/// Weight grid searched during tuning.
pub const LAMBDA_GRID: [f64; 3] = [0.25, 0.5, 1.0];
