//! Evaluation battery: style classifiers, lexical formality, BLEU and
//! fluency perplexity.

mod bleu;
mod classifier;
mod lexicon;

use alloc::string::String;
use alloc::vec::Vec;

pub use bleu::{bleu, bleu_stats, corpus_bleu, BleuConfig, BleuStats, SMOOTHING};
pub use classifier::{style_accuracy, train_style_classifier, ClassifierConfig, NGramStyleClassifier};
pub use lexicon::{lexical_formality_score, normalize_word, Formality, FormalityLexicon};

use crate::discriminator::perplexity;
use crate::model::LanguageModel;
use crate::tokenizer::Tokenizer;
use crate::{Error, Real, Result};

/// Corpus perplexity of `sentences` under a fluency LM trained on the
/// combined style corpora.
pub fn fluency_perplexity<T: Real, S: AsRef<str>>(
    flm: &LanguageModel<T>,
    tokenizer: &Tokenizer,
    sentences: &[S],
) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Config("fluency perplexity of an empty list".into()));
    }
    let max = flm.config().max_positions + 1;
    let seqs: Vec<_> = sentences.iter().map(|s| tokenizer.encode_framed(s.as_ref(), max)).collect();
    perplexity(flm, &seqs)
}

/// A classifier and the label transferred outputs should receive.
pub struct StyleTarget<'a> {
    pub dimension: &'a str,
    pub classifier: &'a NGramStyleClassifier,
    pub label: &'a str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionAccuracy {
    pub dimension: String,
    pub label: String,
    pub accuracy: f64,
}

/// Everything measured about one system's outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sentences: usize,
    pub style_accuracy: Vec<DimensionAccuracy>,
    /// Percentage of outputs labelled with every target style at once.
    pub joint_accuracy: Option<f64>,
    /// Mean lexical formality score over outputs that contain words.
    pub lexical_formality: Option<f64>,
    pub self_bleu: f64,
    pub ref_bleu: Option<f64>,
    pub fluency_perplexity: Option<f64>,
    pub bleu_lowercase: bool,
}

pub struct EvalInputs<'a, S> {
    pub inputs: &'a [S],
    pub outputs: &'a [S],
    pub references: Option<&'a [Vec<S>]>,
    pub targets: &'a [StyleTarget<'a>],
    pub lexicon: Option<(&'a FormalityLexicon, Formality)>,
    pub fluency: Option<(&'a LanguageModel<f32>, &'a Tokenizer)>,
    pub bleu: BleuConfig,
}

pub fn evaluate<S: AsRef<str>>(e: &EvalInputs<'_, S>) -> Result<EvalReport> {
    let n = e.outputs.len();
    if n == 0 {
        return Err(Error::Config("no outputs to evaluate".into()));
    }
    if e.inputs.len() != n {
        return Err(Error::Config(alloc::format!("{} inputs but {} outputs", e.inputs.len(), n)));
    }
    if let Some(r) = e.references {
        if r.len() != n {
            return Err(Error::Config(alloc::format!("{} reference sets but {} outputs", r.len(), n)));
        }
    }
    let mut style = Vec::new();
    for t in e.targets {
        style.push(DimensionAccuracy {
            dimension: t.dimension.into(),
            label: t.label.into(),
            accuracy: style_accuracy(t.classifier, e.outputs, t.label)?,
        });
    }
    let joint_accuracy = (!e.targets.is_empty()).then(|| {
        let hits = e
            .outputs
            .iter()
            .filter(|o| e.targets.iter().all(|t| t.classifier.predict(o.as_ref()) == t.label))
            .count();
        100.0 * hits as f64 / n as f64
    });
    let lexical_formality = match e.lexicon {
        Some((lex, target)) => {
            let scores: Vec<f64> =
                e.outputs.iter().filter_map(|o| lexical_formality_score(o.as_ref(), lex, target).ok()).collect();
            (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
        }
        None => None,
    };
    let self_refs: Vec<Vec<&str>> = e.inputs.iter().map(|i| alloc::vec![i.as_ref()]).collect();
    let outs: Vec<&str> = e.outputs.iter().map(AsRef::as_ref).collect();
    let self_bleu = corpus_bleu(&outs, &self_refs, &e.bleu)?;
    let ref_bleu = match e.references {
        Some(r) => {
            let r: Vec<Vec<&str>> = r.iter().map(|set| set.iter().map(AsRef::as_ref).collect()).collect();
            Some(corpus_bleu(&outs, &r, &e.bleu)?)
        }
        None => None,
    };
    let fluency_perplexity = match e.fluency {
        Some((lm, tok)) => Some(fluency_perplexity(lm, tok, e.outputs)?),
        None => None,
    };
    Ok(EvalReport {
        sentences: n,
        style_accuracy: style,
        joint_accuracy,
        lexical_formality,
        self_bleu,
        ref_bleu,
        fluency_perplexity,
        bleu_lowercase: e.bleu.lowercase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs<'a>(i: &'a [&'a str], o: &'a [&'a str]) -> EvalInputs<'a, &'a str> {
        EvalInputs { inputs: i, outputs: o, references: None, targets: &[], lexicon: None, fluency: None, bleu: BleuConfig::default() }
    }

    #[test]
    fn identical_outputs_have_perfect_self_bleu() {
        let s = ["the cat sat", "a dog ran off"];
        let r = evaluate(&inputs(&s, &s)).unwrap();
        assert_eq!(r.self_bleu, 1.0);
        assert_eq!(r.ref_bleu, None);
    }

    #[test]
    fn empty_and_misaligned_outputs_fail() {
        let empty: [&str; 0] = [];
        assert!(evaluate(&inputs(&empty, &empty)).is_err());
        assert!(evaluate(&inputs(&["a", "b"], &["a"])).is_err());
    }

    #[test]
    fn report_matches_single_metric_calls() {
        let data: Vec<(String, &str)> = (0..40)
            .map(|i| if i % 2 == 0 { (alloc::format!("w{} good", i % 7), "p") } else { (alloc::format!("w{} bad", i % 7), "n") })
            .collect();
        let (clf, _) = train_style_classifier(&data, &ClassifierConfig::default()).unwrap();
        let lex = FormalityLexicon::new(alloc::vec![("good".into(), 0.5)]).unwrap();
        let ins = ["w1 bad", "w2 bad", "w3 good"];
        let outs = ["w1 good", "w2 bad", "w3 good"];
        let refs = [alloc::vec!["w1 good"], alloc::vec!["w2 good"], alloc::vec!["w3 good"]];
        let targets = [StyleTarget { dimension: "s", classifier: &clf, label: "p" }];
        let e = EvalInputs {
            inputs: &ins[..],
            outputs: &outs[..],
            references: Some(&refs[..]),
            targets: &targets,
            lexicon: Some((&lex, Formality::Formal)),
            fluency: None,
            bleu: BleuConfig::default(),
        };
        let r = evaluate(&e).unwrap();
        assert_eq!(r.style_accuracy[0].accuracy, style_accuracy(&clf, &outs, "p").unwrap());
        assert_eq!(r.joint_accuracy, Some(r.style_accuracy[0].accuracy));
        let self_refs: Vec<Vec<&str>> = ins.iter().map(|i| alloc::vec![*i]).collect();
        assert_eq!(r.self_bleu, corpus_bleu(&outs, &self_refs, &BleuConfig::default()).unwrap());
        assert_eq!(r.ref_bleu, Some(corpus_bleu(&outs, &refs, &BleuConfig::default()).unwrap()));
        let lf: f64 = outs.iter().map(|o| lexical_formality_score(o, &lex, Formality::Formal).unwrap()).sum::<f64>() / 3.0;
        assert_eq!(r.lexical_formality, Some(lf));
    }
}
