//! Pre-LayerNorm transformer body shared by every model role.
//!
//! Sequences are packed row-wise into one `[tokens × hidden]` matrix so the
//! dense projections run once per batch; attention is evaluated per
//! [`Segment`]. Decoder layers optionally carry a cross-attention block that
//! reads an encoder memory.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::kernels::*;
use super::params::{ParamSet, ParamSetBuilder, Slot};
use crate::{Error, Real, Result, Rng};

/// Shape of a transformer language model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl TransformerConfig {
    /// Small model that trains on a laptop CPU in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        Self { num_layers: 2, hidden_size: 128, num_heads: 4, dropout: 0.1, max_positions: 64, vocab_size }
    }

    /// The 12-layer, 512-wide, 16-head configuration.
    pub fn full(vocab_size: usize) -> Self {
        Self { num_layers: 12, hidden_size: 512, num_heads: 16, dropout: 0.1, max_positions: 256, vocab_size }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn ff_size(&self) -> usize {
        4 * self.hidden_size
    }

    /// Closed-form parameter count of a language model with this shape.
    pub fn lm_param_count(&self) -> usize {
        let (v, p, d, l) = (self.vocab_size, self.max_positions, self.hidden_size, self.num_layers);
        v * d + p * d + l * (12 * d * d + 13 * d) + 2 * d + v
    }

    /// Parameters added per decoder layer by cross-attention.
    pub fn cross_param_count(&self) -> usize {
        let d = self.hidden_size;
        self.num_layers * (4 * d * d + 6 * d)
    }
}

/// Whether a position may attend to later positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Masked language modelling: every position sees the whole sequence.
    Bidirectional,
    /// Next-token prediction: position `t` sees positions `..=t` only.
    Causal,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Bidirectional => "bidirectional",
            AttentionMode::Causal => "causal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bidirectional" => Some(AttentionMode::Bidirectional),
            "causal" => Some(AttentionMode::Causal),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIdx {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub w_qkv: Slot,
    pub b_qkv: Slot,
    pub w_o: Slot,
    pub b_o: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w_fc: Slot,
    pub b_fc: Slot,
    pub w_proj: Slot,
    pub b_proj: Slot,
}

#[derive(Clone, Debug)]
pub(crate) struct CrossIdx {
    pub ln_g: Slot,
    pub ln_b: Slot,
    pub w_q: Slot,
    pub b_q: Slot,
    pub w_kv: Slot,
    pub b_kv: Slot,
    pub w_o: Slot,
    pub b_o: Slot,
}

#[derive(Clone, Debug)]
pub(crate) struct LmIdx {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub head_bias: Slot,
}

pub(crate) fn add_lm(b: &mut ParamSetBuilder, prefix: &str, cfg: &TransformerConfig) -> LmIdx {
    let (v, p, d) = (cfg.vocab_size, cfg.max_positions, cfg.hidden_size);
    let f = cfg.ff_size();
    let tok_emb = b.add(format!("{prefix}tok_emb"), &[v, d]);
    let pos_emb = b.add(format!("{prefix}pos_emb"), &[p, d]);
    let layers = (0..cfg.num_layers)
        .map(|l| {
            let n = |s: &str| format!("{prefix}layers.{l}.{s}");
            LayerIdx {
                ln1_g: b.add(n("ln1.gamma"), &[d]),
                ln1_b: b.add(n("ln1.beta"), &[d]),
                w_qkv: b.add(n("attn.w_qkv"), &[d, 3 * d]),
                b_qkv: b.add(n("attn.b_qkv"), &[3 * d]),
                w_o: b.add(n("attn.w_out"), &[d, d]),
                b_o: b.add(n("attn.b_out"), &[d]),
                ln2_g: b.add(n("ln2.gamma"), &[d]),
                ln2_b: b.add(n("ln2.beta"), &[d]),
                w_fc: b.add(n("mlp.w_in"), &[d, f]),
                b_fc: b.add(n("mlp.b_in"), &[f]),
                w_proj: b.add(n("mlp.w_out"), &[f, d]),
                b_proj: b.add(n("mlp.b_out"), &[d]),
            }
        })
        .collect();
    let lnf_g = b.add(format!("{prefix}ln_f.gamma"), &[d]);
    let lnf_b = b.add(format!("{prefix}ln_f.beta"), &[d]);
    let head_bias = b.add(format!("{prefix}head.bias"), &[v]);
    LmIdx { tok_emb, pos_emb, layers, lnf_g, lnf_b, head_bias }
}

pub(crate) fn add_cross(b: &mut ParamSetBuilder, prefix: &str, cfg: &TransformerConfig) -> Vec<CrossIdx> {
    let d = cfg.hidden_size;
    (0..cfg.num_layers)
        .map(|l| {
            let n = |s: &str| format!("{prefix}{l}.{s}");
            CrossIdx {
                ln_g: b.add(n("ln.gamma"), &[d]),
                ln_b: b.add(n("ln.beta"), &[d]),
                w_q: b.add(n("w_q"), &[d, d]),
                b_q: b.add(n("b_q"), &[d]),
                w_kv: b.add(n("w_kv"), &[d, 2 * d]),
                b_kv: b.add(n("b_kv"), &[2 * d]),
                w_o: b.add(n("w_out"), &[d, d]),
                b_o: b.add(n("b_out"), &[d]),
            }
        })
        .collect()
}

pub const INIT_STD: f64 = 0.02;

/// Normal(0, 0.02) for matrices and embeddings, ones for LayerNorm gains,
/// zeros for every bias.
pub(crate) fn init_params<T: Real>(params: &mut ParamSet<T>, prefix: &str, rng: &mut Rng) {
    let specs: Vec<_> = params.specs().iter().filter(|s| s.name.starts_with(prefix)).cloned().collect();
    let data = params.data_mut();
    for spec in specs {
        let out = spec.slot.of_mut(data);
        if spec.name.ends_with(".gamma") {
            out.fill(T::one());
        } else if spec.shape.len() == 2 {
            for v in out.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = T::of(z * INIT_STD);
            }
        } else {
            out.fill(T::zero());
        }
    }
}

/// A contiguous run of rows belonging to one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

pub(crate) fn pack<'a, I: IntoIterator<Item = &'a [u32]>>(seqs: I) -> (Vec<u32>, Vec<Segment>) {
    let mut tokens = Vec::new();
    let mut segs = Vec::new();
    for s in seqs {
        segs.push(Segment { start: tokens.len(), len: s.len() });
        tokens.extend_from_slice(s);
    }
    (tokens, segs)
}

/// Read-only view of a body's parameters.
pub(crate) struct BodyRef<'a, T> {
    pub cfg: &'a TransformerConfig,
    pub params: &'a [T],
    pub idx: &'a LmIdx,
    pub causal: bool,
}

/// Encoder memory visible to decoder cross-attention.
pub(crate) struct CrossRef<'a, T> {
    pub params: &'a [T],
    pub idx: &'a [CrossIdx],
    pub memory: &'a [T],
    pub mem_segs: &'a [Segment],
    /// Memory segment read by each decoder segment.
    pub src_of: &'a [usize],
}

struct LnCache<T> {
    out: Vec<T>,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> LnCache<T> {
    fn run(x: &[T], g: &[T], b: &[T], n: usize, d: usize) -> Self {
        let mut c = LnCache { out: vec![T::zero(); n * d], xhat: vec![T::zero(); n * d], rstd: vec![T::zero(); n] };
        layer_norm(x, g, b, &mut c.out, &mut c.xhat, &mut c.rstd, n, d);
        c
    }

    fn backward(&self, dy: &[T], g: &[T], dx: &mut [T], dg: &mut [T], db: &mut [T], n: usize, d: usize) {
        layer_norm_backward(dy, &self.xhat, &self.rstd, g, dx, dg, db, n, d);
    }
}

struct CrossCache<T> {
    ln: LnCache<T>,
    q: Vec<T>,
    kv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    drop: Option<Vec<T>>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    drop_att: Option<Vec<T>>,
    cross: Option<CrossCache<T>>,
    ln2: LnCache<T>,
    fc: Vec<T>,
    act: Vec<T>,
    drop_mlp: Option<Vec<T>>,
}

/// Activations kept for the backward pass.
pub(crate) struct BodyCache<T> {
    tokens: Vec<u32>,
    segs: Vec<Segment>,
    drop_emb: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
}

impl<T> BodyCache<T> {
    /// Final hidden states (after the closing LayerNorm), `[tokens × hidden]`.
    pub fn hidden(&self) -> &[T] {
        &self.lnf.out
    }
}

/// Where a set of attention queries and keys live inside packed buffers.
struct AttnGeom {
    q_off: usize,
    q_stride: usize,
    k_off: usize,
    v_off: usize,
    kv_stride: usize,
    lq: usize,
    lk: usize,
    causal: bool,
}

fn dropout_mask<T: Real>(len: usize, p: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect()
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Multi-head attention for one query block. `probs` receives
/// `heads × lq × lk` weights; `out` rows (stride `d`) receive the context.
#[allow(clippy::too_many_arguments)]
fn attn_forward<T: Real>(
    g: &AttnGeom,
    qbuf: &[T],
    kvbuf: &[T],
    heads: usize,
    dh: usize,
    probs: &mut [T],
    out: &mut [T],
    out_row0: usize,
    d: usize,
) {
    let scale = T::of(1.0 / Float::sqrt(dh as f64));
    for h in 0..heads {
        for i in 0..g.lq {
            let q = &qbuf[g.q_off + i * g.q_stride + h * dh..][..dh];
            let row = &mut probs[(h * g.lq + i) * g.lk..][..g.lk];
            let visible = if g.causal { i + 1 } else { g.lk };
            for j in 0..visible {
                let k = &kvbuf[g.k_off + j * g.kv_stride + h * dh..][..dh];
                row[j] = dot(q, k) * scale;
            }
            softmax_in_place(&mut row[..visible]);
            for r in row[visible..].iter_mut() {
                *r = T::zero();
            }
            let o = &mut out[(out_row0 + i) * d + h * dh..][..dh];
            for j in 0..visible {
                let v = &kvbuf[g.v_off + j * g.kv_stride + h * dh..][..dh];
                axpy(o, row[j], v);
            }
        }
    }
}

/// Backward of [`attn_forward`]; gradients land in dense `dq [lq×d]`,
/// `dk [lk×d]` and `dv [lk×d]` scratch buffers.
#[allow(clippy::too_many_arguments)]
fn attn_backward<T: Real>(
    g: &AttnGeom,
    qbuf: &[T],
    kvbuf: &[T],
    probs: &[T],
    dout: &[T],
    dout_row0: usize,
    heads: usize,
    dh: usize,
    d: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let scale = T::of(1.0 / Float::sqrt(dh as f64));
    let mut dp = vec![T::zero(); g.lk];
    for h in 0..heads {
        for i in 0..g.lq {
            let p = &probs[(h * g.lq + i) * g.lk..][..g.lk];
            let visible = if g.causal { i + 1 } else { g.lk };
            let go = &dout[(dout_row0 + i) * d + h * dh..][..dh];
            let mut weighted = T::zero();
            for j in 0..visible {
                let v = &kvbuf[g.v_off + j * g.kv_stride + h * dh..][..dh];
                dp[j] = dot(go, v);
                weighted += p[j] * dp[j];
                axpy(&mut dv[j * d + h * dh..][..dh], p[j], go);
            }
            let q = &qbuf[g.q_off + i * g.q_stride + h * dh..][..dh];
            for j in 0..visible {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let k = &kvbuf[g.k_off + j * g.kv_stride + h * dh..][..dh];
                axpy(&mut dq[i * d + h * dh..][..dh], ds, k);
                axpy(&mut dk[j * d + h * dh..][..dh], ds, q);
            }
        }
    }
}

fn probs_len(segs: &[Segment], kv_len: impl Fn(usize) -> usize, heads: usize) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(segs.len());
    let mut total = 0;
    for (s, seg) in segs.iter().enumerate() {
        offs.push(total);
        total += heads * seg.len * kv_len(s);
    }
    (offs, total)
}

pub(crate) fn body_forward<T: Real>(
    body: &BodyRef<'_, T>,
    tokens: &[u32],
    segs: &[Segment],
    cross: Option<&CrossRef<'_, T>>,
    mut dropout: Option<&mut Rng>,
) -> Result<BodyCache<T>> {
    let cfg = body.cfg;
    let (d, heads, dh, f) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim(), cfg.ff_size());
    let n = tokens.len();
    let p = body.params;
    let idx = body.idx;
    let p_drop = cfg.dropout;
    for seg in segs {
        if seg.len > cfg.max_positions {
            return Err(Error::Length { len: seg.len, max: cfg.max_positions });
        }
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidToken { id, vocab_size: cfg.vocab_size });
    }

    let mut x = vec![T::zero(); n * d];
    let tok_emb = idx.tok_emb.of(p);
    let pos_emb = idx.pos_emb.of(p);
    for seg in segs {
        for t in 0..seg.len {
            let r = seg.start + t;
            let xr = &mut x[r * d..(r + 1) * d];
            let te = &tok_emb[tokens[r] as usize * d..][..d];
            let pe = &pos_emb[t * d..][..d];
            for j in 0..d {
                xr[j] = te[j] + pe[j];
            }
        }
    }
    let mut mask_for = |len: usize| -> Option<Vec<T>> {
        match dropout.as_deref_mut() {
            Some(rng) if p_drop > 0.0 => Some(dropout_mask(len, p_drop, rng)),
            _ => None,
        }
    };
    let drop_emb = mask_for(n * d);
    apply_mask(&mut x, &drop_emb);

    let (self_offs, self_total) = probs_len(segs, |s| segs[s].len, heads);
    let cross_offs = cross.map(|c| probs_len(segs, |s| c.mem_segs[c.src_of[s]].len, heads));

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (l, li) in idx.layers.iter().enumerate() {
        let ln1 = LnCache::run(&x, li.ln1_g.of(p), li.ln1_b.of(p), n, d);
        let mut qkv = vec![T::zero(); n * 3 * d];
        linear(&mut qkv, &ln1.out, li.w_qkv.of(p), li.b_qkv.of(p), n, d, 3 * d);
        let mut probs = vec![T::zero(); self_total];
        let mut att = vec![T::zero(); n * d];
        for (s, seg) in segs.iter().enumerate() {
            let g = AttnGeom {
                q_off: seg.start * 3 * d,
                q_stride: 3 * d,
                k_off: seg.start * 3 * d + d,
                v_off: seg.start * 3 * d + 2 * d,
                kv_stride: 3 * d,
                lq: seg.len,
                lk: seg.len,
                causal: body.causal,
            };
            attn_forward(&g, &qkv, &qkv, heads, dh, &mut probs[self_offs[s]..], &mut att, seg.start, d);
        }
        let mut a_out = vec![T::zero(); n * d];
        linear(&mut a_out, &att, li.w_o.of(p), li.b_o.of(p), n, d, d);
        let drop_att = mask_for(n * d);
        apply_mask(&mut a_out, &drop_att);
        for (xi, ai) in x.iter_mut().zip(&a_out) {
            *xi += *ai;
        }

        let cross_cache = match cross {
            Some(c) => {
                let ci = &c.idx[l];
                let cp = c.params;
                let (offs, total) = cross_offs.as_ref().unwrap();
                let ns = c.memory.len() / d;
                let ln = LnCache::run(&x, ci.ln_g.of(cp), ci.ln_b.of(cp), n, d);
                let mut q = vec![T::zero(); n * d];
                linear(&mut q, &ln.out, ci.w_q.of(cp), ci.b_q.of(cp), n, d, d);
                let mut kv = vec![T::zero(); ns * 2 * d];
                linear(&mut kv, c.memory, ci.w_kv.of(cp), ci.b_kv.of(cp), ns, d, 2 * d);
                let mut probs = vec![T::zero(); *total];
                let mut att = vec![T::zero(); n * d];
                for (s, seg) in segs.iter().enumerate() {
                    let mem = c.mem_segs[c.src_of[s]];
                    let g = AttnGeom {
                        q_off: seg.start * d,
                        q_stride: d,
                        k_off: mem.start * 2 * d,
                        v_off: mem.start * 2 * d + d,
                        kv_stride: 2 * d,
                        lq: seg.len,
                        lk: mem.len,
                        causal: false,
                    };
                    attn_forward(&g, &q, &kv, heads, dh, &mut probs[offs[s]..], &mut att, seg.start, d);
                }
                let mut c_out = vec![T::zero(); n * d];
                linear(&mut c_out, &att, ci.w_o.of(cp), ci.b_o.of(cp), n, d, d);
                let drop = mask_for(n * d);
                apply_mask(&mut c_out, &drop);
                for (xi, ci) in x.iter_mut().zip(&c_out) {
                    *xi += *ci;
                }
                Some(CrossCache { ln, q, kv, probs, att, drop })
            }
            None => None,
        };

        let ln2 = LnCache::run(&x, li.ln2_g.of(p), li.ln2_b.of(p), n, d);
        let mut fc = vec![T::zero(); n * f];
        linear(&mut fc, &ln2.out, li.w_fc.of(p), li.b_fc.of(p), n, d, f);
        let act: Vec<T> = fc.iter().map(|&v| gelu(v)).collect();
        let mut m_out = vec![T::zero(); n * d];
        linear(&mut m_out, &act, li.w_proj.of(p), li.b_proj.of(p), n, f, d);
        let drop_mlp = mask_for(n * d);
        apply_mask(&mut m_out, &drop_mlp);
        for (xi, mi) in x.iter_mut().zip(&m_out) {
            *xi += *mi;
        }
        layers.push(LayerCache { ln1, qkv, probs, att, drop_att, cross: cross_cache, ln2, fc, act, drop_mlp });
    }
    let lnf = LnCache::run(&x, idx.lnf_g.of(p), idx.lnf_b.of(p), n, d);
    Ok(BodyCache { tokens: tokens.to_vec(), segs: segs.to_vec(), drop_emb, layers, lnf })
}

pub(crate) fn body_backward<T: Real>(
    body: &BodyRef<'_, T>,
    cache: &BodyCache<T>,
    d_out: &[T],
    grad: &mut [T],
    cross: Option<(&CrossRef<'_, T>, &mut [T])>,
) {
    let cfg = body.cfg;
    let (d, heads, dh, f) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim(), cfg.ff_size());
    let n = cache.tokens.len();
    let p = body.params;
    let idx = body.idx;
    let segs = &cache.segs;
    let mut cross = cross;

    let mut dx = vec![T::zero(); n * d];
    {
        let (dg, db) = split_two(grad, idx.lnf_g, idx.lnf_b);
        cache.lnf.backward(d_out, idx.lnf_g.of(p), &mut dx, dg, db, n, d);
    }

    let (self_offs, _) = probs_len(segs, |s| segs[s].len, heads);
    let cross_offs = cross.as_ref().map(|(c, _)| probs_len(segs, |s| c.mem_segs[c.src_of[s]].len, heads).0);

    for (l, li) in idx.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];

        // MLP block
        let mut dm = dx.clone();
        apply_mask(&mut dm, &lc.drop_mlp);
        let mut d_act = vec![T::zero(); n * f];
        {
            let (dw, db) = split_two(grad, li.w_proj, li.b_proj);
            linear_backward(&dm, &lc.act, li.w_proj.of(p), Some(&mut d_act), dw, db, n, f, d);
        }
        for (g, &z) in d_act.iter_mut().zip(&lc.fc) {
            *g *= gelu_grad(z);
        }
        let mut d_ln2 = vec![T::zero(); n * d];
        {
            let (dw, db) = split_two(grad, li.w_fc, li.b_fc);
            linear_backward(&d_act, &lc.ln2.out, li.w_fc.of(p), Some(&mut d_ln2), dw, db, n, d, f);
        }
        {
            let (dg, db) = split_two(grad, li.ln2_g, li.ln2_b);
            lc.ln2.backward(&d_ln2, li.ln2_g.of(p), &mut dx, dg, db, n, d);
        }

        // Cross-attention block
        if let (Some(cc), Some((c, d_memory))) = (&lc.cross, cross.as_mut()) {
            let ci = &c.idx[l];
            let cp = c.params;
            let ns = c.memory.len() / d;
            let offs = cross_offs.as_ref().unwrap();
            let mut dc = dx.clone();
            apply_mask(&mut dc, &cc.drop);
            let mut d_att = vec![T::zero(); n * d];
            {
                let (dw, db) = split_two(grad, ci.w_o, ci.b_o);
                linear_backward(&dc, &cc.att, ci.w_o.of(cp), Some(&mut d_att), dw, db, n, d, d);
            }
            let mut d_q = vec![T::zero(); n * d];
            let mut d_kv = vec![T::zero(); ns * 2 * d];
            for (s, seg) in segs.iter().enumerate() {
                let mem = c.mem_segs[c.src_of[s]];
                let g = AttnGeom {
                    q_off: seg.start * d,
                    q_stride: d,
                    k_off: mem.start * 2 * d,
                    v_off: mem.start * 2 * d + d,
                    kv_stride: 2 * d,
                    lq: seg.len,
                    lk: mem.len,
                    causal: false,
                };
                let mut dq = vec![T::zero(); seg.len * d];
                let mut dk = vec![T::zero(); mem.len * d];
                let mut dv = vec![T::zero(); mem.len * d];
                attn_backward(&g, &cc.q, &cc.kv, &cc.probs[offs[s]..], &d_att, seg.start, heads, dh, d, &mut dq, &mut dk, &mut dv);
                for i in 0..seg.len {
                    axpy(&mut d_q[(seg.start + i) * d..][..d], T::one(), &dq[i * d..][..d]);
                }
                for j in 0..mem.len {
                    let r = mem.start + j;
                    axpy(&mut d_kv[r * 2 * d..][..d], T::one(), &dk[j * d..][..d]);
                    axpy(&mut d_kv[r * 2 * d + d..][..d], T::one(), &dv[j * d..][..d]);
                }
            }
            {
                let (dw, db) = split_two(grad, ci.w_kv, ci.b_kv);
                linear_backward(&d_kv, c.memory, ci.w_kv.of(cp), Some(&mut **d_memory), dw, db, ns, d, 2 * d);
            }
            let mut d_ln = vec![T::zero(); n * d];
            {
                let (dw, db) = split_two(grad, ci.w_q, ci.b_q);
                linear_backward(&d_q, &cc.ln.out, ci.w_q.of(cp), Some(&mut d_ln), dw, db, n, d, d);
            }
            let (dg, db) = split_two(grad, ci.ln_g, ci.ln_b);
            cc.ln.backward(&d_ln, ci.ln_g.of(cp), &mut dx, dg, db, n, d);
        }

        // Self-attention block
        let mut da = dx.clone();
        apply_mask(&mut da, &lc.drop_att);
        let mut d_att = vec![T::zero(); n * d];
        {
            let (dw, db) = split_two(grad, li.w_o, li.b_o);
            linear_backward(&da, &lc.att, li.w_o.of(p), Some(&mut d_att), dw, db, n, d, d);
        }
        let mut d_qkv = vec![T::zero(); n * 3 * d];
        for (s, seg) in segs.iter().enumerate() {
            let g = AttnGeom {
                q_off: seg.start * 3 * d,
                q_stride: 3 * d,
                k_off: seg.start * 3 * d + d,
                v_off: seg.start * 3 * d + 2 * d,
                kv_stride: 3 * d,
                lq: seg.len,
                lk: seg.len,
                causal: body.causal,
            };
            let mut dq = vec![T::zero(); seg.len * d];
            let mut dk = vec![T::zero(); seg.len * d];
            let mut dv = vec![T::zero(); seg.len * d];
            attn_backward(&g, &lc.qkv, &lc.qkv, &lc.probs[self_offs[s]..], &d_att, seg.start, heads, dh, d, &mut dq, &mut dk, &mut dv);
            for i in 0..seg.len {
                let r = (seg.start + i) * 3 * d;
                axpy(&mut d_qkv[r..r + d], T::one(), &dq[i * d..][..d]);
                axpy(&mut d_qkv[r + d..r + 2 * d], T::one(), &dk[i * d..][..d]);
                axpy(&mut d_qkv[r + 2 * d..r + 3 * d], T::one(), &dv[i * d..][..d]);
            }
        }
        let mut d_ln1 = vec![T::zero(); n * d];
        {
            let (dw, db) = split_two(grad, li.w_qkv, li.b_qkv);
            linear_backward(&d_qkv, &lc.ln1.out, li.w_qkv.of(p), Some(&mut d_ln1), dw, db, n, d, 3 * d);
        }
        let (dg, db) = split_two(grad, li.ln1_g, li.ln1_b);
        lc.ln1.backward(&d_ln1, li.ln1_g.of(p), &mut dx, dg, db, n, d);
    }

    apply_mask(&mut dx, &cache.drop_emb);
    for seg in segs {
        for t in 0..seg.len {
            let r = seg.start + t;
            let tok = cache.tokens[r] as usize;
            let g = &dx[r * d..(r + 1) * d];
            axpy(&mut idx.tok_emb.of_mut(grad)[tok * d..][..d], T::one(), g);
            axpy(&mut idx.pos_emb.of_mut(grad)[t * d..][..d], T::one(), g);
        }
    }
}

/// Two disjoint mutable tensors out of one flat buffer.
pub(crate) fn split_two<T>(buf: &mut [T], a: Slot, b: Slot) -> (&mut [T], &mut [T]) {
    debug_assert!(a.offset + a.len <= b.offset || b.offset + b.len <= a.offset);
    if a.offset < b.offset {
        let (lo, hi) = buf.split_at_mut(b.offset);
        (&mut lo[a.offset..a.offset + a.len], &mut hi[..b.len])
    } else {
        let (lo, hi) = buf.split_at_mut(a.offset);
        let bb = &mut lo[b.offset..b.offset + b.len];
        (&mut hi[..a.len], bb)
    }
}

/// Key/value cache for token-by-token causal decoding.
pub(crate) struct IncrementalState<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    cross_kv: Vec<Vec<T>>,
    mem_len: usize,
    pos: usize,
}

impl<T: Real> IncrementalState<T> {
    /// Prepare decoding; `memory` is one encoder segment (`[len × d]`).
    pub fn new(body: &BodyRef<'_, T>, cross: Option<(&[T], &[CrossIdx], &[T])>) -> Self {
        let cfg = body.cfg;
        let d = cfg.hidden_size;
        let (cross_kv, mem_len) = match cross {
            Some((cp, cidx, memory)) => {
                let ns = memory.len() / d;
                let kv = cidx
                    .iter()
                    .map(|ci| {
                        let mut kv = vec![T::zero(); ns * 2 * d];
                        linear(&mut kv, memory, ci.w_kv.of(cp), ci.b_kv.of(cp), ns, d, 2 * d);
                        kv
                    })
                    .collect();
                (kv, ns)
            }
            None => (Vec::new(), 0),
        };
        Self {
            keys: vec![Vec::new(); cfg.num_layers],
            values: vec![Vec::new(); cfg.num_layers],
            cross_kv,
            mem_len,
            pos: 0,
        }
    }

    /// Feed one token and return the next-token logits.
    pub fn step(&mut self, body: &BodyRef<'_, T>, cross: Option<(&[T], &[CrossIdx])>, token: u32) -> Vec<T> {
        let cfg = body.cfg;
        let (d, heads, dh, f, v) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim(), cfg.ff_size(), cfg.vocab_size);
        let p = body.params;
        let idx = body.idx;
        let t = self.pos;
        let te = &idx.tok_emb.of(p)[token as usize * d..][..d];
        let pe = &idx.pos_emb.of(p)[t * d..][..d];
        let mut x: Vec<T> = te.iter().zip(pe).map(|(&a, &b)| a + b).collect();
        let mut ln = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        let mut rstd = [T::zero()];
        let scale = T::of(1.0 / Float::sqrt(dh as f64));

        for (l, li) in idx.layers.iter().enumerate() {
            layer_norm(&x, li.ln1_g.of(p), li.ln1_b.of(p), &mut ln, &mut xhat, &mut rstd, 1, d);
            let mut qkv = vec![T::zero(); 3 * d];
            linear(&mut qkv, &ln, li.w_qkv.of(p), li.b_qkv.of(p), 1, d, 3 * d);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let att = cached_attention(&qkv[..d], &self.keys[l], &self.values[l], t + 1, heads, dh, scale);
            let mut a_out = vec![T::zero(); d];
            linear(&mut a_out, &att, li.w_o.of(p), li.b_o.of(p), 1, d, d);
            axpy(&mut x, T::one(), &a_out);

            if let Some((cp, cidx)) = cross {
                let ci = &cidx[l];
                layer_norm(&x, ci.ln_g.of(cp), ci.ln_b.of(cp), &mut ln, &mut xhat, &mut rstd, 1, d);
                let mut q = vec![T::zero(); d];
                linear(&mut q, &ln, ci.w_q.of(cp), ci.b_q.of(cp), 1, d, d);
                let kv = &self.cross_kv[l];
                let (mut k, mut vv) = (Vec::with_capacity(self.mem_len * d), Vec::with_capacity(self.mem_len * d));
                for j in 0..self.mem_len {
                    k.extend_from_slice(&kv[j * 2 * d..j * 2 * d + d]);
                    vv.extend_from_slice(&kv[j * 2 * d + d..(j + 1) * 2 * d]);
                }
                let att = cached_attention(&q, &k, &vv, self.mem_len, heads, dh, scale);
                let mut c_out = vec![T::zero(); d];
                linear(&mut c_out, &att, ci.w_o.of(cp), ci.b_o.of(cp), 1, d, d);
                axpy(&mut x, T::one(), &c_out);
            }

            layer_norm(&x, li.ln2_g.of(p), li.ln2_b.of(p), &mut ln, &mut xhat, &mut rstd, 1, d);
            let mut fc = vec![T::zero(); f];
            linear(&mut fc, &ln, li.w_fc.of(p), li.b_fc.of(p), 1, d, f);
            for z in fc.iter_mut() {
                *z = gelu(*z);
            }
            let mut m_out = vec![T::zero(); d];
            linear(&mut m_out, &fc, li.w_proj.of(p), li.b_proj.of(p), 1, f, d);
            axpy(&mut x, T::one(), &m_out);
        }
        layer_norm(&x, idx.lnf_g.of(p), idx.lnf_b.of(p), &mut ln, &mut xhat, &mut rstd, 1, d);
        let mut logits = idx.head_bias.of(p).to_vec();
        matmul_bt_acc(&mut logits, &ln, idx.tok_emb.of(p), 1, d, v);
        self.pos += 1;
        logits
    }
}

fn cached_attention<T: Real>(q: &[T], k: &[T], v: &[T], len: usize, heads: usize, dh: usize, scale: T) -> Vec<T> {
    let d = heads * dh;
    let mut out = vec![T::zero(); d];
    let mut w = vec![T::zero(); len];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for j in 0..len {
            w[j] = dot(qh, &k[j * d + h * dh..][..dh]) * scale;
        }
        softmax_in_place(&mut w);
        let oh = &mut out[h * dh..(h + 1) * dh];
        for j in 0..len {
            axpy(oh, w[j], &v[j * d + h * dh..][..dh]);
        }
    }
    out
}
