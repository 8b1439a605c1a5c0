//! Two-dimensional synthetic style corpora.
//!
//! Every sentence follows one template,
//!
//! ```text
//! DET ADJ NOUN VERB DET NOUN MARKER
//! ```
//!
//! The subject noun is uniform; its adjective and verb come from the three
//! tied to that noun, and the object noun from the four tied to the verb.
//! Each determiner is one of the two tied to the noun it introduces.
//! The ties are fixed tables drawn once from [`LEXICON_SEED`], so every word
//! has its own typical neighbours whatever its case. Dimension `case` has
//! styles `upper` and `lower` (the whole sentence is written in that case,
//! the marker is random); dimension `marker` has styles `bang` and `dot`
//! (the sentence ends in `!` or `.`, the case is random). The unlabelled
//! `generic` corpus flips case per word and picks a random marker, so no
//! style is present in it.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use style_forge_core::{seeded_rng, Rng};

pub const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some"];
pub const ADJECTIVES: &[&str] =
    &["red", "small", "quiet", "old", "bright", "heavy", "green", "tall", "soft", "quick", "cold", "round"];
pub const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "horse", "tree", "house", "river", "stone", "boat", "lamp", "chair", "road", "cloud",
    "field", "door", "book",
];
pub const VERBS: &[&str] =
    &["sees", "likes", "finds", "moves", "holds", "hears", "meets", "takes", "keeps", "leaves", "calls", "wants"];

pub const DIM_CASE: &str = "case";
pub const DIM_MARKER: &str = "marker";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Upper,
    Lower,
    PerWord,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Marker {
    Bang,
    Dot,
    Random,
}

/// The four labelled corpora plus the generic pretraining corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub name: &'static str,
    pub dimension: &'static str,
    pub label: &'static str,
    pub case: Case,
    pub marker: Marker,
}

pub const STYLES: [SyntheticSpec; 4] = [
    SyntheticSpec { name: "case_upper", dimension: DIM_CASE, label: "upper", case: Case::Upper, marker: Marker::Random },
    SyntheticSpec { name: "case_lower", dimension: DIM_CASE, label: "lower", case: Case::Lower, marker: Marker::Random },
    SyntheticSpec { name: "marker_bang", dimension: DIM_MARKER, label: "bang", case: Case::Random, marker: Marker::Bang },
    SyntheticSpec { name: "marker_dot", dimension: DIM_MARKER, label: "dot", case: Case::Random, marker: Marker::Dot },
];

pub const GENERIC: SyntheticSpec =
    SyntheticSpec { name: "generic", dimension: "none", label: "none", case: Case::PerWord, marker: Marker::Random };

/// Seed of the word-association tables. Part of the grammar, not of a run.
pub const LEXICON_SEED: u64 = 0x5717_1e;

/// `(adjectives, verbs)` tied to each noun and object nouns tied to each
/// verb, as indices into the word lists.
pub struct Grammar {
    pub noun_determiners: Vec<[usize; 2]>,
    pub noun_adjectives: Vec<[usize; 3]>,
    pub noun_verbs: Vec<[usize; 3]>,
    pub verb_objects: Vec<[usize; 4]>,
}

fn choose_distinct<const K: usize>(n: usize, rng: &mut Rng) -> [usize; K] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = [0; K];
    out.copy_from_slice(&idx[..K]);
    out
}

impl Grammar {
    pub fn new() -> Self {
        let mut rng = seeded_rng(LEXICON_SEED);
        Self {
            noun_determiners: (0..NOUNS.len()).map(|_| choose_distinct(DETERMINERS.len(), &mut rng)).collect(),
            noun_adjectives: (0..NOUNS.len()).map(|_| choose_distinct(ADJECTIVES.len(), &mut rng)).collect(),
            noun_verbs: (0..NOUNS.len()).map(|_| choose_distinct(VERBS.len(), &mut rng)).collect(),
            verb_objects: (0..VERBS.len()).map(|_| choose_distinct(NOUNS.len(), &mut rng)).collect(),
        }
    }
}

impl Default for Grammar {
    fn default() -> Self {
        Self::new()
    }
}

fn sentence(spec: &SyntheticSpec, g: &Grammar, rng: &mut Rng) -> String {
    let det = |noun: usize, rng: &mut Rng| DETERMINERS[*g.noun_determiners[noun].choose(rng).unwrap()];
    let subject = rng.gen_range(0..NOUNS.len());
    let adjective = *g.noun_adjectives[subject].choose(rng).unwrap();
    let verb = *g.noun_verbs[subject].choose(rng).unwrap();
    let object = *g.verb_objects[verb].choose(rng).unwrap();
    let words = [
        det(subject, rng),
        ADJECTIVES[adjective],
        NOUNS[subject],
        VERBS[verb],
        det(object, rng),
        NOUNS[object],
    ];
    let marker = match spec.marker {
        Marker::Bang => "!",
        Marker::Dot => ".",
        Marker::Random => {
            if rng.gen::<bool>() {
                "!"
            } else {
                "."
            }
        }
    };
    let sentence_upper = match spec.case {
        Case::Upper => Some(true),
        Case::Lower => Some(false),
        Case::Random => Some(rng.gen::<bool>()),
        Case::PerWord => None,
    };
    let mut out: Vec<String> = words
        .iter()
        .map(|w| {
            let upper = sentence_upper.unwrap_or_else(|| rng.gen::<bool>());
            if upper {
                w.to_uppercase()
            } else {
                w.to_string()
            }
        })
        .collect();
    out.push(marker.into());
    out.join(" ")
}

/// `n` sentences of one corpus. Each corpus draws from its own stream so
/// sizes can change without reshuffling the others.
pub fn generate(spec: &SyntheticSpec, n: usize, seed: u64) -> Vec<String> {
    let salt = spec.name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = seeded_rng(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let g = Grammar::new();
    (0..n).map(|_| sentence(spec, &g, &mut rng)).collect()
}

/// Train/test split of a style corpus with no sentence appearing in both.
pub fn split_disjoint(sentences: Vec<String>, test: usize) -> (Vec<String>, Vec<String>) {
    let test_part: Vec<String> = sentences[..test.min(sentences.len())].to_vec();
    let held: BTreeSet<&String> = test_part.iter().collect();
    let train = sentences[test.min(sentences.len())..].iter().filter(|s| !held.contains(s)).cloned().collect();
    (train, test_part)
}

/// Oracle labels of a synthetic sentence, used to check classifiers.
pub fn oracle_case(sentence: &str) -> Option<&'static str> {
    let letters: Vec<char> = sentence.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.is_empty() {
        None
    } else if letters.iter().all(|c| c.is_uppercase()) {
        Some("upper")
    } else if letters.iter().all(|c| c.is_lowercase()) {
        Some("lower")
    } else {
        None
    }
}

pub fn oracle_marker(sentence: &str) -> Option<&'static str> {
    match sentence.trim_end().chars().last() {
        Some('!') => Some("bang"),
        Some('.') => Some("dot"),
        _ => None,
    }
}


/// Corpus sizes for [`write_task`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSizes {
    pub generic: usize,
    pub train: usize,
    pub test: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self { generic: 4000, train: 2000, test: 200 }
    }
}

/// Style names used in the generated config.
pub const STYLE_NAMES: [&str; 4] = ["upper", "lower", "bang", "dot"];

/// Write `generic.txt`, `<style>.train.txt` / `<style>.test.txt` for the
/// four styles, and a `synthetic.conf` that transfers towards upper + bang.
/// Settings that make the task train in minutes on one CPU core. Rewards are
/// per-token so the one-token marker change and the whole-sentence case
/// change are rewarded on the same scale, and reconstruction is weighted low
/// enough that a style reward can outweigh copying the input.
const TASK_SETTINGS: &str = "\
tokenizer.merges=300
pretrain.steps=600
finetune.epochs=12
transfer.targets=upper,bang
transfer.lambdas=0.25,1
transfer.lambda_dae=0.25
transfer.length_normalize=true
transfer.temperature=1
transfer.max_len=16
transfer.steps=2400
transfer.lr=0.0003
transfer.lr_decay=true
transfer.dae_warmup_steps=400
transfer.inference_p_mask=0
eval.bleu_lowercase=true
";

pub fn write_task(dir: &std::path::Path, sizes: TaskSizes, seed: u64) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let write = |name: &str, lines: &[String]| -> std::io::Result<()> {
        let mut text = lines.join("\n");
        text.push('\n');
        std::fs::write(dir.join(name), text)
    };
    write("generic.txt", &generate(&GENERIC, sizes.generic, seed))?;
    let mut conf = format!(
        "# synthetic two-dimension task\nseed={seed}\npaths.generic=generic.txt\npaths.output_dir=run\n"
    );
    for (spec, name) in STYLES.iter().zip(STYLE_NAMES) {
        let (train, test) = split_disjoint(generate(spec, sizes.train + sizes.test, seed), sizes.test);
        write(&format!("{name}.train.txt"), &train)?;
        write(&format!("{name}.test.txt"), &test)?;
        conf.push_str(&format!(
            "style.{name}.dimension={}\nstyle.{name}.label={}\nstyle.{name}.train={name}.train.txt\nstyle.{name}.test={name}.test.txt\n",
            spec.dimension, spec.label
        ));
    }
    conf.push_str(TASK_SETTINGS);
    let path = dir.join("synthetic.conf");
    std::fs::write(&path, conf)?;
    Ok(path)
}
