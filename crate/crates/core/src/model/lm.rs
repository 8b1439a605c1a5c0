use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{log_sum_exp, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::params::ParamSet;
use super::transformer::{add_lm, body_backward, body_forward, init_params, pack, BodyRef, LmIdx, Segment};
use super::{AttentionMode, TransformerConfig};
use crate::corpus::MaskedExample;
use crate::tokenizer::{special, TokenSequence};
use crate::{seeded_rng, Error, Real, Result, Rng};

/// One prediction scored by the output head: row `row` of the hidden
/// states should predict `id`, contributing `weight × NLL` to the loss.
#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadTarget {
    pub row: usize,
    pub id: u32,
    pub weight: f64,
}

pub(crate) struct HeadGrad<'a, T> {
    pub d_hidden: &'a mut [T],
    pub d_emb: &'a mut [T],
    pub d_bias: &'a mut [T],
}

const HEAD_CHUNK: usize = 32;

/// Tied-embedding output layer. Returns the log-probability of every
/// target; with `grad`, accumulates the gradient of `Σ weight × NLL`.
/// Ids flagged in `banned` get zero probability.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_log_probs<T: Real>(
    hidden: &[T],
    d: usize,
    emb: &[T],
    bias: &[T],
    targets: &[HeadTarget],
    banned: Option<&[bool]>,
    mut grad: Option<HeadGrad<'_, T>>,
) -> Vec<T> {
    let v = bias.len();
    let mut out = Vec::with_capacity(targets.len());
    let mut h = vec![T::zero(); HEAD_CHUNK * d];
    let mut logits = vec![T::zero(); HEAD_CHUNK * v];
    for chunk in targets.chunks(HEAD_CHUNK) {
        let m = chunk.len();
        for (i, t) in chunk.iter().enumerate() {
            h[i * d..(i + 1) * d].copy_from_slice(&hidden[t.row * d..(t.row + 1) * d]);
            logits[i * v..(i + 1) * v].copy_from_slice(bias);
        }
        matmul_bt_acc(&mut logits, &h[..m * d], emb, m, d, v);
        for (i, t) in chunk.iter().enumerate() {
            let row = &mut logits[i * v..(i + 1) * v];
            let lse = log_sum_exp(row, banned);
            out.push(row[t.id as usize] - lse);
            if grad.is_some() {
                let w = T::of(t.weight);
                for (j, z) in row.iter_mut().enumerate() {
                    *z = if banned.is_some_and(|b| b[j]) { T::zero() } else { w * (*z - lse).exp() };
                }
                row[t.id as usize] -= w;
            }
        }
        if let Some(g) = grad.as_mut() {
            let gl = &logits[..m * v];
            for row in gl.chunks_exact(v) {
                for (db, &x) in g.d_bias.iter_mut().zip(row) {
                    *db += x;
                }
            }
            matmul_at_acc(g.d_emb, gl, &h[..m * d], m, v, d);
            let mut dh = vec![T::zero(); m * d];
            matmul_acc(&mut dh, gl, emb, m, v, d);
            for (i, t) in chunk.iter().enumerate() {
                let dst = &mut g.d_hidden[t.row * d..(t.row + 1) * d];
                for (a, &b) in dst.iter_mut().zip(&dh[i * d..(i + 1) * d]) {
                    *a += b;
                }
            }
        }
    }
    out
}

/// Decoder-side input/target split for causal scoring: the model reads
/// `[BOS] + scored[..n-1]` and predicts `scored`.
pub(crate) fn causal_io(seq: &TokenSequence) -> (Vec<u32>, &[u32]) {
    let scored = seq.scored();
    let mut input = Vec::with_capacity(scored.len());
    input.push(special::BOS);
    input.extend_from_slice(&scored[..scored.len().saturating_sub(1)]);
    (input, scored)
}

/// A transformer body with a tied output head, run either bidirectionally
/// (masked LM) or causally (next-token LM).
#[derive(Clone, Debug)]
pub struct LanguageModel<T = f32> {
    config: TransformerConfig,
    mode: AttentionMode,
    params: ParamSet<T>,
    idx: LmIdx,
}

impl<T: Real> LanguageModel<T> {
    /// Freshly initialized model.
    pub fn new(config: TransformerConfig, mode: AttentionMode, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config, mode)?;
        init_params(&mut m.params, "", &mut seeded_rng(seed));
        Ok(m)
    }

    /// Model with every parameter zero: it predicts the uniform distribution.
    pub fn zeros(config: TransformerConfig, mode: AttentionMode) -> Result<Self> {
        config.validate()?;
        let mut b = ParamSet::<T>::builder();
        let idx = add_lm(&mut b, "", &config);
        Ok(Self { config, mode, params: b.finish(), idx })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn mode(&self) -> AttentionMode {
        self.mode
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

    /// Same weights, different attention pattern.
    pub fn with_mode(&self, mode: AttentionMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn cast<U: Real>(&self) -> LanguageModel<U> {
        LanguageModel { config: self.config, mode: self.mode, params: self.params.cast(), idx: self.idx.clone() }
    }

    pub(crate) fn body(&self) -> BodyRef<'_, T> {
        BodyRef {
            cfg: &self.config,
            params: self.params.data(),
            idx: &self.idx,
            causal: self.mode == AttentionMode::Causal,
        }
    }

    fn require(&self, mode: AttentionMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Mode { expected: mode.name() });
        }
        Ok(())
    }

    fn score(
        &self,
        tokens: &[u32],
        segs: &[Segment],
        targets: &[HeadTarget],
        grad: bool,
        dropout: Option<&mut Rng>,
    ) -> Result<(Vec<T>, Option<Vec<T>>)> {
        let body = self.body();
        let cache = body_forward(&body, tokens, segs, None, dropout)?;
        let d = self.config.hidden_size;
        let p = self.params.data();
        let emb = self.idx.tok_emb.of(p);
        let bias = self.idx.head_bias.of(p);
        if !grad {
            return Ok((head_log_probs(cache.hidden(), d, emb, bias, targets, None, None), None));
        }
        let mut g = self.params.zeros_like();
        let mut d_hidden = vec![T::zero(); tokens.len() * d];
        let lp = {
            let (lo, hi) = g.split_at_mut(self.idx.head_bias.offset);
            let hg = HeadGrad {
                d_hidden: &mut d_hidden,
                d_emb: self.idx.tok_emb.of_mut(lo),
                d_bias: &mut hi[..self.idx.head_bias.len],
            };
            head_log_probs(cache.hidden(), d, emb, bias, targets, None, Some(hg))
        };
        body_backward(&body, &cache, &d_hidden, &mut g, None);
        Ok((lp, Some(g)))
    }

    fn mlm_batch(&self, batch: &[MaskedExample]) -> Result<(Vec<u32>, Vec<Segment>, Vec<HeadTarget>)> {
        self.require(AttentionMode::Bidirectional)?;
        let (tokens, segs) = pack(batch.iter().map(|e| e.corrupted.ids()));
        let count: usize = batch.iter().map(|e| e.targets.len()).sum();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let w = 1.0 / count as f64;
        let mut targets = Vec::with_capacity(count);
        for (e, seg) in batch.iter().zip(&segs) {
            for t in &e.targets {
                if t.original as usize >= self.config.vocab_size {
                    return Err(Error::InvalidToken { id: t.original, vocab_size: self.config.vocab_size });
                }
                targets.push(HeadTarget { row: seg.start + t.position, id: t.original, weight: w });
            }
        }
        Ok((tokens, segs, targets))
    }

    /// Mean cross-entropy over all masked-LM targets of the batch.
    pub fn mlm_loss(&self, batch: &[MaskedExample]) -> Result<T> {
        let (tokens, segs, targets) = self.mlm_batch(batch)?;
        let (lp, _) = self.score(&tokens, &segs, &targets, false, None)?;
        Ok(mean_nll(&lp))
    }

    /// [`mlm_loss`](Self::mlm_loss) and its gradient. Dropout is active when
    /// an RNG is supplied.
    pub fn mlm_loss_grad(&self, batch: &[MaskedExample], dropout: Option<&mut Rng>) -> Result<(T, Vec<T>)> {
        let (tokens, segs, targets) = self.mlm_batch(batch)?;
        let (lp, g) = self.score(&tokens, &segs, &targets, true, dropout)?;
        Ok((mean_nll(&lp), g.unwrap()))
    }

    fn clm_batch(&self, batch: &[TokenSequence]) -> Result<(Vec<u32>, Vec<Segment>, Vec<HeadTarget>)> {
        self.require(AttentionMode::Causal)?;
        let io: Vec<_> = batch.iter().map(causal_io).collect();
        let count: usize = io.iter().map(|(_, s)| s.len()).sum();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let (tokens, segs) = pack(io.iter().map(|(i, _)| i.as_slice()));
        let w = 1.0 / count as f64;
        let mut targets = Vec::with_capacity(count);
        for ((_, scored), seg) in io.iter().zip(&segs) {
            for (t, &id) in scored.iter().enumerate() {
                if id as usize >= self.config.vocab_size {
                    return Err(Error::InvalidToken { id, vocab_size: self.config.vocab_size });
                }
                targets.push(HeadTarget { row: seg.start + t, id, weight: w });
            }
        }
        Ok((tokens, segs, targets))
    }

    /// Mean next-token cross-entropy over every scored token of the batch,
    /// so `exp(clm_loss)` is the batch perplexity.
    pub fn clm_loss(&self, batch: &[TokenSequence]) -> Result<T> {
        let (tokens, segs, targets) = self.clm_batch(batch)?;
        let (lp, _) = self.score(&tokens, &segs, &targets, false, None)?;
        Ok(mean_nll(&lp))
    }

    pub fn clm_loss_grad(&self, batch: &[TokenSequence], dropout: Option<&mut Rng>) -> Result<(T, Vec<T>)> {
        let (tokens, segs, targets) = self.clm_batch(batch)?;
        let (lp, g) = self.score(&tokens, &segs, &targets, true, dropout)?;
        Ok((mean_nll(&lp), g.unwrap()))
    }

    /// Per-token log-probabilities of each sequence's scored tokens.
    pub fn token_log_probs(&self, batch: &[TokenSequence]) -> Result<Vec<Vec<T>>> {
        let (tokens, segs, targets) = self.clm_batch(batch)?;
        let (lp, _) = self.score(&tokens, &segs, &targets, false, None)?;
        let mut out = Vec::with_capacity(batch.len());
        let mut it = lp.into_iter();
        for s in batch {
            out.push(it.by_ref().take(s.scored().len()).collect());
        }
        Ok(out)
    }

    /// `log P(x)` summed over the scored tokens of one sequence.
    pub fn sequence_log_prob(&self, seq: &TokenSequence) -> Result<T> {
        if seq.scored().is_empty() {
            return Err(Error::DegenerateInput("empty sequence"));
        }
        let lp = self.token_log_probs(core::slice::from_ref(seq))?;
        Ok(lp[0].iter().copied().sum())
    }
}

impl<T: Real> LanguageModel<T> {
    /// Total log-likelihood and scored-token count over a corpus, evaluated
    /// in fixed-size chunks and accumulated in `f64`.
    pub fn corpus_log_likelihood(&self, corpus: &[TokenSequence]) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut tokens = 0;
        for chunk in corpus.chunks(SCORE_CHUNK) {
            for lp in self.token_log_probs(chunk)? {
                tokens += lp.len();
                total += lp.iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        Ok((total, tokens))
    }
}

const SCORE_CHUNK: usize = 64;

fn mean_nll<T: Real>(lp: &[T]) -> T {
    -lp.iter().copied().sum::<T>() / T::of(lp.len() as f64)
}
