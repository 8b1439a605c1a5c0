//! Run configuration: a flat `section.key=value` file.
//!
//! ```text
//! seed=7
//! paths.generic=data/generic.txt
//! model.hidden_size=128
//! style.upper.dimension=case
//! style.upper.train=data/case_upper.train.txt
//! transfer.targets=upper,bang
//! transfer.lambdas=1,1
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory holding the file. `STYLE_FORGE_SEED`
//! overrides `seed`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use style_forge_core::corpus::NoiseConfig;
use style_forge_core::discriminator::FinetuneConfig;
use style_forge_core::eval::{BleuConfig, ClassifierConfig, Formality};
use style_forge_core::hash::ContentHasher;
use style_forge_core::model::{AdamConfig, PretrainConfig, TransformerConfig};
use style_forge_core::transfer::TransferConfig;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "STYLE_FORGE_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEntry {
    pub name: String,
    pub dimension: String,
    pub label: String,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub generic: PathBuf,
    pub lexicon: Option<(PathBuf, Formality)>,
    pub merges: usize,
    pub max_len: usize,
    /// `vocab_size` is a placeholder until a vocabulary exists.
    pub model: TransformerConfig,
    pub noise: NoiseConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_checkpoint_every: usize,
    pub finetune: FinetuneConfig,
    pub styles: Vec<StyleEntry>,
    /// Style names the transfer model is trained towards.
    pub targets: Vec<String>,
    pub transfer: TransferConfig,
    pub transfer_checkpoint_every: usize,
    pub classifier: ClassifierConfig,
    pub bleu: BleuConfig,
    pub fluency: bool,
    hash: String,
}

/// Keys that only locate files. They are left out of the config hash so a
/// rerun elsewhere on disk carries the same hash.
fn is_location(key: &str) -> bool {
    key.starts_with("paths.") || (key.starts_with("style.") && (key.ends_with(".train") || key.ends_with(".test")))
}

struct Raw {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Raw {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> CliResult<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::Usage(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(|v| self.base.join(v))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> CliResult<Vec<T>> {
        match self.take(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| CliError::Usage(format!("{key}: cannot parse {s:?}"))))
                .collect(),
        }
    }
}

pub fn parse_pairs(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key {}", n + 1, k.trim())));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn parse(text: &str, base: &Path, seed_override: Option<&str>) -> CliResult<Self> {
        let mut map = parse_pairs(text)?;
        if let Some(s) = seed_override {
            map.insert("seed".into(), s.trim().into());
        }
        let mut h = ContentHasher::new();
        for (k, v) in map.iter().filter(|(k, _)| !is_location(k)) {
            h.str(k).str(v);
        }
        let hash = h.finish();
        let mut r = Raw { map, base: base.to_path_buf() };

        let seed: u64 = r.parse("seed", 0)?;
        let output_dir = r.path("paths.output_dir").unwrap_or_else(|| base.join("run"));
        let generic = r.path("paths.generic").ok_or_else(|| CliError::Usage("paths.generic is required".into()))?;
        let lexicon_path = r.path("paths.lexicon");
        let lexicon_target = match r.take("eval.lexicon_target").as_deref() {
            None | Some("formal") => Formality::Formal,
            Some("informal") => Formality::Informal,
            Some(v) => return Err(CliError::Usage(format!("eval.lexicon_target: {v:?} is not formal|informal"))),
        };
        let lexicon = lexicon_path.map(|p| (p, lexicon_target));

        let merges = r.parse("tokenizer.merges", 500)?;
        let max_len = r.parse("tokenizer.max_len", 64)?;

        let d = TransformerConfig::desk(0);
        let model = TransformerConfig {
            num_layers: r.parse("model.num_layers", d.num_layers)?,
            hidden_size: r.parse("model.hidden_size", d.hidden_size)?,
            num_heads: r.parse("model.num_heads", d.num_heads)?,
            dropout: r.parse("model.dropout", d.dropout)?,
            max_positions: r.parse("model.max_positions", d.max_positions)?,
            vocab_size: 0,
        };

        let n = NoiseConfig::default();
        let noise = NoiseConfig {
            p_drop: r.parse("noise.p_drop", n.p_drop)?,
            p_mask: r.parse("noise.p_mask", n.p_mask)?,
            mlm_select: r.parse("noise.mlm_select", n.mlm_select)?,
            mlm_mask_frac: r.parse("noise.mlm_mask_frac", n.mlm_mask_frac)?,
            mlm_random_frac: r.parse("noise.mlm_random_frac", n.mlm_random_frac)?,
            mlm_keep_frac: r.parse("noise.mlm_keep_frac", n.mlm_keep_frac)?,
        };
        noise.validate()?;

        let p = PretrainConfig::default();
        let pretrain = PretrainConfig {
            steps: r.parse("pretrain.steps", p.steps)?,
            batch_size: r.parse("pretrain.batch_size", p.batch_size)?,
            lr: r.parse("pretrain.lr", p.lr)?,
            warmup_steps: r.parse("pretrain.warmup_steps", p.warmup_steps)?,
            clip_norm: r.parse("pretrain.clip_norm", p.clip_norm)?,
            noise,
            seed,
        };
        let pretrain_checkpoint_every = r.parse("pretrain.checkpoint_every", 200)?;

        let f = FinetuneConfig::default();
        let max_steps: usize = r.parse("finetune.max_steps", 0)?;
        let finetune = FinetuneConfig {
            epochs: r.parse("finetune.epochs", f.epochs)?,
            max_steps: (max_steps > 0).then_some(max_steps),
            batch_size: r.parse("finetune.batch_size", f.batch_size)?,
            adam: AdamConfig { lr: r.parse("finetune.lr", f.adam.lr)?, ..f.adam },
            warmup_steps: r.parse("finetune.warmup_steps", f.warmup_steps)?,
            clip_norm: r.parse("finetune.clip_norm", f.clip_norm)?,
            val_fraction: r.parse("finetune.val_fraction", f.val_fraction)?,
            seed,
        };

        let names: BTreeSet<String> = r
            .map
            .keys()
            .filter_map(|k| k.strip_prefix("style."))
            .filter_map(|k| k.rsplit_once('.').map(|(name, _)| name.to_string()))
            .collect();
        let mut styles = Vec::new();
        for name in names {
            let dimension = r
                .take(&format!("style.{name}.dimension"))
                .ok_or_else(|| CliError::Usage(format!("style.{name}.dimension is required")))?;
            let label = r.take(&format!("style.{name}.label")).unwrap_or_else(|| name.clone());
            let train = r
                .path(&format!("style.{name}.train"))
                .ok_or_else(|| CliError::Usage(format!("style.{name}.train is required")))?;
            let test = r.path(&format!("style.{name}.test"));
            styles.push(StyleEntry { name, dimension, label, train, test });
        }

        let targets: Vec<String> = r.list("transfer.targets")?;
        let mut lambdas: Vec<f64> = r.list("transfer.lambdas")?;
        if lambdas.is_empty() {
            lambdas = vec![1.0; targets.len()];
        }
        let t = TransferConfig::new(lambdas);
        let inference = NoiseConfig {
            p_drop: r.parse("transfer.inference_p_drop", t.inference_noise.p_drop)?,
            p_mask: r.parse("transfer.inference_p_mask", t.inference_noise.p_mask)?,
            ..noise
        };
        let transfer = TransferConfig {
            lambda_dae: r.parse("transfer.lambda_dae", t.lambda_dae)?,
            sample_temperature: r.parse("transfer.temperature", t.sample_temperature)?,
            max_len: r.parse("transfer.max_len", t.max_len)?,
            reward_length_normalize: r.parse("transfer.length_normalize", t.reward_length_normalize)?,
            steps: r.parse("transfer.steps", t.steps)?,
            batch_size: r.parse("transfer.batch_size", t.batch_size)?,
            seed,
            noise,
            inference_noise: inference,
            adam: AdamConfig { lr: r.parse("transfer.lr", t.adam.lr)?, ..t.adam },
            warmup_steps: r.parse("transfer.warmup_steps", t.warmup_steps)?,
            lr_decay: r.parse("transfer.lr_decay", t.lr_decay)?,
            clip_norm: r.parse("transfer.clip_norm", t.clip_norm)?,
            trace_samples: r.parse("transfer.trace_samples", t.trace_samples)?,
            dae_warmup_steps: r.parse("transfer.dae_warmup_steps", t.dae_warmup_steps)?,
            ..t
        };
        let transfer_checkpoint_every = r.parse("transfer.checkpoint_every", 200)?;

        let c = ClassifierConfig::default();
        let classifier = ClassifierConfig {
            epochs: r.parse("eval.classifier_epochs", c.epochs)?,
            dim: r.parse("eval.classifier_dim", c.dim)?,
            buckets: r.parse("eval.classifier_buckets", c.buckets)?,
            lr: r.parse("eval.classifier_lr", c.lr)?,
            seed,
        };
        let bleu = BleuConfig { max_n: r.parse("eval.bleu_max_n", 4)?, lowercase: r.parse("eval.bleu_lowercase", false)? };
        let fluency = r.parse("eval.fluency", true)?;

        if let Some(k) = r.map.keys().next() {
            return Err(CliError::Usage(format!("unknown config key {k}")));
        }
        let cfg = Self {
            seed,
            output_dir,
            generic,
            lexicon,
            merges,
            max_len,
            model,
            noise,
            pretrain,
            pretrain_checkpoint_every,
            finetune,
            styles,
            targets,
            transfer,
            transfer_checkpoint_every,
            classifier,
            bleu,
            fluency,
            hash,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        for t in &self.targets {
            if self.style(t).is_none() {
                return Err(CliError::Usage(format!("transfer target {t} is not a configured style")));
            }
        }
        if self.transfer.lambdas.len() != self.targets.len() {
            return Err(CliError::Usage(format!(
                "{} transfer.lambdas for {} transfer.targets",
                self.transfer.lambdas.len(),
                self.targets.len()
            )));
        }
        let mut probe = self.model;
        probe.vocab_size = 8;
        probe.validate()?;
        Ok(())
    }

    /// Digest of every setting that affects results, seed included.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn style(&self, name: &str) -> Option<&StyleEntry> {
        self.styles.iter().find(|s| s.name == name)
    }

    pub fn model_for(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig { vocab_size, ..self.model }
    }

    /// Paths every stage reads must exist before any work starts.
    pub fn check_inputs(&self) -> CliResult<()> {
        let mut paths = vec![&self.generic];
        for s in &self.styles {
            paths.push(&s.train);
            paths.extend(s.test.as_ref());
        }
        if let Some((p, _)) = &self.lexicon {
            paths.push(p);
        }
        for p in paths {
            if !p.exists() {
                return Err(CliError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
            }
        }
        Ok(())
    }
}
