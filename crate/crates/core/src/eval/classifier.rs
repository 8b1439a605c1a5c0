use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::hash::Hasher;

use fnv::FnvHasher;
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::{seeded_rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub dim: usize,
    pub buckets: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 10, dim: 16, buckets: 1 << 16, lr: 0.5, seed: 0 }
    }
}

/// Averaged hashed unigram+bigram embeddings followed by a linear softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct NGramStyleClassifier {
    labels: Vec<String>,
    dim: usize,
    buckets: usize,
    emb: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
}

fn bucket(parts: &[&str], buckets: usize) -> usize {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p.as_bytes());
        h.write_u8(0xff);
    }
    (h.finish() % buckets as u64) as usize
}

fn features(sentence: &str, buckets: usize) -> Vec<usize> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let mut f: Vec<usize> = words.iter().map(|w| bucket(&[w], buckets)).collect();
    f.extend(words.windows(2).map(|p| bucket(p, buckets)));
    f
}

impl NGramStyleClassifier {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn hidden(&self, feats: &[usize]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        if feats.is_empty() {
            return h;
        }
        for &f in feats {
            for (a, &e) in h.iter_mut().zip(&self.emb[f * self.dim..(f + 1) * self.dim]) {
                *a += e;
            }
        }
        let inv = 1.0 / feats.len() as f64;
        h.iter_mut().for_each(|v| *v *= inv);
        h
    }

    fn probs_of(&self, h: &[f64]) -> Vec<f64> {
        let c = self.labels.len();
        let mut z: Vec<f64> = (0..c)
            .map(|k| self.b[k] + h.iter().enumerate().map(|(j, &x)| x * self.w[j * c + k]).sum::<f64>())
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = Float::exp(*v - max);
            sum += *v;
        }
        z.iter_mut().for_each(|v| *v /= sum);
        z
    }

    /// Class probabilities in [`labels`](Self::labels) order.
    pub fn probabilities(&self, sentence: &str) -> Vec<f64> {
        self.probs_of(&self.hidden(&features(sentence, self.buckets)))
    }

    pub fn predict(&self, sentence: &str) -> &str {
        let p = self.probabilities(sentence);
        let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        &self.labels[best]
    }
}

/// Train on `(sentence, label)` pairs with plain SGD on cross-entropy.
/// Returns the classifier and its training accuracy in percent.
pub fn train_style_classifier<S: AsRef<str>, L: AsRef<str>>(
    data: &[(S, L)],
    cfg: &ClassifierConfig,
) -> Result<(NGramStyleClassifier, f64)> {
    let mut labels: Vec<String> = data.iter().map(|(_, l)| l.as_ref().into()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Config("a style classifier needs at least two labels".into()));
    }
    if cfg.dim == 0 || cfg.buckets == 0 {
        return Err(Error::Config("classifier dim and buckets must be positive".into()));
    }
    let c = labels.len();
    let mut rng = seeded_rng(cfg.seed);
    let scale = 1.0 / cfg.dim as f64;
    let emb = (0..cfg.buckets * cfg.dim).map(|_| rng.gen_range(-scale..scale)).collect();
    let mut clf = NGramStyleClassifier { labels, dim: cfg.dim, buckets: cfg.buckets, emb, w: vec![0.0; cfg.dim * c], b: vec![0.0; c] };
    let examples: Vec<(Vec<usize>, usize)> = data
        .iter()
        .map(|(s, l)| {
            let y = clf.labels.iter().position(|x| x == l.as_ref()).unwrap();
            (features(s.as_ref(), cfg.buckets), y)
        })
        .collect();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (feats, y) = &examples[i];
            let h = clf.hidden(feats);
            let mut g = clf.probs_of(&h);
            g[*y] -= 1.0;
            let mut dh = vec![0.0; clf.dim];
            for j in 0..clf.dim {
                for k in 0..c {
                    dh[j] += g[k] * clf.w[j * c + k];
                    clf.w[j * c + k] -= cfg.lr * g[k] * h[j];
                }
            }
            for k in 0..c {
                clf.b[k] -= cfg.lr * g[k];
            }
            if !feats.is_empty() {
                let step = cfg.lr / feats.len() as f64;
                for &f in feats {
                    for (e, &d) in clf.emb[f * clf.dim..(f + 1) * clf.dim].iter_mut().zip(&dh) {
                        *e -= step * d;
                    }
                }
            }
        }
    }
    let correct = data.iter().filter(|(s, l)| clf.predict(s.as_ref()) == l.as_ref()).count();
    let acc = 100.0 * correct as f64 / data.len() as f64;
    Ok((clf, acc))
}

/// Percentage of `sentences` the classifier assigns to `target`.
pub fn style_accuracy<S: AsRef<str>>(clf: &NGramStyleClassifier, sentences: &[S], target: &str) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Config("style accuracy of an empty list".into()));
    }
    let hits = sentences.iter().filter(|s| clf.predict(s.as_ref()) == target).count();
    Ok(100.0 * hits as f64 / sentences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn separable() -> Vec<(String, &'static str)> {
        let pos = ["good", "great", "fine", "lovely"];
        let neg = ["bad", "awful", "poor", "grim"];
        let nouns = ["food", "room", "staff", "view", "price"];
        let mut out = Vec::new();
        for (i, n) in nouns.iter().enumerate() {
            for j in 0..4 {
                out.push((format!("the {n} was {}", pos[(i + j) % 4]), "pos"));
                out.push((format!("the {n} was {}", neg[(i + j) % 4]), "neg"));
            }
        }
        out
    }

    #[test]
    fn separable_data_is_learned_perfectly() {
        let data = separable();
        let (train, held): (Vec<_>, Vec<_>) = data.iter().cloned().enumerate().partition(|(i, _)| i % 5 != 0);
        let train: Vec<_> = train.into_iter().map(|(_, x)| x).collect();
        let (clf, acc) = train_style_classifier(&train, &ClassifierConfig::default()).unwrap();
        assert_eq!(acc, 100.0);
        for (_, (s, l)) in held {
            assert_eq!(clf.predict(&s), l, "{s}");
        }
        let p = clf.probabilities("the view was grim");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_label_is_rejected() {
        let data = [("a b", "x"), ("c d", "x")];
        assert!(matches!(train_style_classifier(&data, &ClassifierConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn accuracy_is_a_percentage_of_hits() {
        let (clf, _) = train_style_classifier(&separable(), &ClassifierConfig::default()).unwrap();
        let mut s: Vec<&str> = vec!["the food was good"; 7];
        s.extend(["the food was bad"; 3]);
        assert_eq!(style_accuracy(&clf, &s, "pos").unwrap(), 70.0);
        assert_eq!(style_accuracy(&clf, &s[..7], "pos").unwrap(), 100.0);
        assert_eq!(style_accuracy(&clf, &s[..7], "neg").unwrap(), 0.0);
        let empty: [&str; 0] = [];
        assert!(style_accuracy(&clf, &empty, "pos").is_err());
    }
}
