use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BleuConfig {
    pub max_n: usize,
    /// Compare words case-insensitively.
    pub lowercase: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self { max_n: 4, lowercase: false }
    }
}

/// Description of the smoothing rule, recorded alongside reported scores.
pub const SMOOTHING: &str = "add-one on orders n>=2 with zero matches";

/// Clipped n-gram matches and candidate n-gram totals per order, plus the
/// lengths the brevity penalty needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    fn add(&mut self, o: &BleuStats) {
        if self.matches.len() < o.matches.len() {
            self.matches.resize(o.matches.len(), 0);
            self.totals.resize(o.totals.len(), 0);
        }
        for n in 0..o.matches.len() {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.candidate_len += o.candidate_len;
        self.reference_len += o.reference_len;
    }

    /// Clipped precisions (smoothed for `n ≥ 2` where nothing matched)
    /// combined geometrically and scaled by the brevity penalty.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..self.matches.len() {
            let (m, c) = (self.matches[n], self.totals[n]);
            let p = if m > 0 {
                m as f64 / c as f64
            } else if n == 0 {
                return 0.0;
            } else {
                1.0 / (c as f64 + 1.0)
            };
            log_sum += Float::ln(p);
        }
        let c = self.candidate_len as f64;
        let r = self.reference_len as f64;
        let bp = if c > r { 1.0 } else { Float::exp(1.0 - r / c) };
        bp * Float::exp(log_sum / self.matches.len() as f64)
    }
}

fn words(s: &[&str], lowercase: bool) -> Vec<String> {
    s.iter().map(|w| if lowercase { w.to_lowercase() } else { String::from(*w) }).collect()
}

fn ngram_counts(w: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    for g in w.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Sufficient statistics of one candidate against its references. The
/// brevity penalty uses the shortest reference, so adding a reference
/// never lowers the score.
pub fn bleu_stats(candidate: &[&str], references: &[Vec<&str>], cfg: &BleuConfig) -> Result<BleuStats> {
    if references.is_empty() {
        return Err(Error::Config("BLEU needs at least one reference".into()));
    }
    if cfg.max_n == 0 {
        return Err(Error::Config("BLEU max_n must be at least 1".into()));
    }
    let cand = words(candidate, cfg.lowercase);
    let refs: Vec<Vec<String>> = references.iter().map(|r| words(r, cfg.lowercase)).collect();
    let mut stats = BleuStats {
        matches: vec![0; cfg.max_n],
        totals: vec![0; cfg.max_n],
        candidate_len: cand.len(),
        reference_len: refs.iter().map(Vec::len).min().unwrap(),
    };
    for n in 1..=cfg.max_n {
        let cc = ngram_counts(&cand, n);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in &refs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        for (g, k) in cc {
            stats.totals[n - 1] += k;
            stats.matches[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
        }
    }
    Ok(stats)
}

/// Sentence-level BLEU in `[0, 1]`.
pub fn bleu(candidate: &[&str], references: &[Vec<&str>], cfg: &BleuConfig) -> Result<f64> {
    if candidate.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::DegenerateInput("BLEU of an empty candidate or reference"));
    }
    Ok(bleu_stats(candidate, references, cfg)?.score())
}

/// Corpus-level BLEU: statistics are pooled over all segments before the
/// precisions are formed.
pub fn corpus_bleu<S: AsRef<str>>(candidates: &[S], references: &[Vec<S>], cfg: &BleuConfig) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Config(alloc::format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut total = BleuStats::default();
    for (c, refs) in candidates.iter().zip(references) {
        let cw: Vec<&str> = c.as_ref().split_whitespace().collect();
        let rw: Vec<Vec<&str>> = refs.iter().map(|r| r.as_ref().split_whitespace().collect()).collect();
        total.add(&bleu_stats(&cw, &rw, cfg)?);
    }
    Ok(total.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn clipped_unigram_precision_hand_example() {
        let st = bleu_stats(&w("the the the the the the the"), &[w("the cat is on the mat")], &BleuConfig::default()).unwrap();
        assert_eq!((st.matches[0], st.totals[0]), (2, 7));
    }

    #[test]
    fn identity_and_disjoint() {
        let cfg = BleuConfig::default();
        let a = w("a quick brown fox jumps");
        assert_eq!(bleu(&a, &[a.clone()], &cfg).unwrap(), 1.0);
        assert_eq!(bleu(&w("x y z"), &[w("a b c")], &cfg).unwrap(), 0.0);
        assert_eq!(bleu(&w("a"), &[w("a")], &cfg).unwrap(), 1.0);
    }

    #[test]
    fn smoothing_hand_example() {
        // candidate "a b c d", reference "a b c e":
        // p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0/1 → (0+1)/(1+1) = 1/2
        let got = bleu(&w("a b c d"), &[w("a b c e")], &BleuConfig::default()).unwrap();
        let want = (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_hand_example() {
        // candidate "a b" vs reference "a b c d": precisions 1, BP = exp(1 - 4/2)
        let cfg = BleuConfig { max_n: 2, lowercase: false };
        let got = bleu(&w("a b"), &[w("a b c d")], &cfg).unwrap();
        assert!((got - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn lowercase_option_ignores_case() {
        let cfg = BleuConfig { lowercase: true, ..Default::default() };
        assert_eq!(bleu(&w("THE CAT SAT DOWN"), &[w("the cat sat down")], &cfg).unwrap(), 1.0);
    }

    #[test]
    fn empty_reference_set_is_a_config_error() {
        assert!(matches!(bleu(&w("a"), &[], &BleuConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let c = ["a b c d", "e f"];
        let r = [vec!["a b c d"], vec!["e f"]];
        assert_eq!(corpus_bleu(&c, &r, &BleuConfig::default()).unwrap(), 1.0);
        assert!(corpus_bleu(&c, &r[..1], &BleuConfig::default()).is_err());
    }
}
