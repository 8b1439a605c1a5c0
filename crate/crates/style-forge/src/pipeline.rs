//! The staged workflow behind the CLI. Every stage reads and writes files
//! under the run's output directory:
//!
//! | file | written by |
//! |---|---|
//! | `vocab.bpe` | [`train_bpe`] |
//! | `base.ckpt`, `base.loss` | [`pretrain`] |
//! | `disc-<style>.ckpt`, `mixture.ckpt`, `fluency.ckpt` | [`finetune_discriminators`] |
//! | `transfer.ckpt`, `transfer.trace` | [`train_transfer`] |
//! | `report.txt`, `report.jsonl` | [`evaluate`] |

use std::path::{Path, PathBuf};

use style_forge_core::corpus::{apply_mlm_mask, mix_corpora, StyledCorpus};
use style_forge_core::discriminator::{finetune_discriminator, perplexity, DiscriminatorCorpus, StyleDiscriminator};
use style_forge_core::eval::{self, train_style_classifier, EvalReport, NGramStyleClassifier, StyleTarget};
use style_forge_core::model::{self, Adam, AttentionMode, EncoderDecoder, LanguageModel, PretrainConfig};
use style_forge_core::tokenizer::{TokenSequence, Tokenizer};
use style_forge_core::transfer;
use style_forge_core::{seeded_rng, Error};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{self, Checkpoint, Stamp};

pub struct Run {
    pub cfg: RunConfig,
}

const VOCAB: &str = "vocab.bpe";
const BASE: &str = "base.ckpt";
const MIXTURE: &str = "mixture.ckpt";
const FLUENCY: &str = "fluency.ckpt";
const TRANSFER: &str = "transfer.ckpt";
const TRACE: &str = "transfer.trace";

/// Sentences scored for the pretraining validation loss.
const VALIDATION_SENTENCES: usize = 256;

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        Self { cfg }
    }

    pub fn stamp(&self) -> Stamp {
        Stamp { config_hash: self.cfg.hash().to_string(), seed: self.cfg.seed }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.path(VOCAB)
    }

    pub fn base_path(&self) -> PathBuf {
        self.path(BASE)
    }

    pub fn disc_path(&self, style: &str) -> PathBuf {
        self.path(&format!("disc-{style}.ckpt"))
    }

    pub fn mixture_path(&self) -> PathBuf {
        self.path(MIXTURE)
    }

    pub fn fluency_path(&self) -> PathBuf {
        self.path(FLUENCY)
    }

    pub fn transfer_path(&self) -> PathBuf {
        self.path(TRANSFER)
    }

    pub fn trace_path(&self) -> PathBuf {
        self.path(TRACE)
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len.min(self.cfg.model.max_positions)
    }

    pub fn tokenizer(&self) -> CliResult<Tokenizer> {
        let p = self.vocab_path();
        if !p.exists() {
            return Err(CliError::Usage(format!("{} is missing; run train-bpe first", p.display())));
        }
        Ok(formats::read_bpe(&p)?.0)
    }

    pub fn corpus(&self, path: &Path, dimension: &str, label: &str, tok: &Tokenizer) -> CliResult<StyledCorpus> {
        let lines = formats::read_lines(path)?;
        StyledCorpus::from_lines(&lines, dimension, label, tok, self.max_len())
            .map_err(|e| CliError::format(path, e.to_string()))
    }

    pub fn style_corpus(&self, name: &str, tok: &Tokenizer) -> CliResult<StyledCorpus> {
        let s = self.cfg.style(name).ok_or_else(|| CliError::Usage(format!("unknown style {name}")))?;
        self.corpus(&s.train, &s.dimension, &s.label, tok)
    }

    fn stamped(&self, mut ck: Checkpoint, tok: &Tokenizer, stage: &str) -> Checkpoint {
        ck.stamp(&self.stamp());
        ck.set("vocab_hash", tok.fingerprint());
        ck.set("stage", stage);
        ck
    }

    /// Read a checkpoint another stage wrote and check it belongs to this
    /// vocabulary.
    fn upstream(&self, path: &Path, tok: &Tokenizer) -> CliResult<Checkpoint> {
        if !path.exists() {
            return Err(CliError::Usage(format!("{} is missing; run the earlier stage first", path.display())));
        }
        let ck = Checkpoint::read(path)?;
        if ck.get("vocab_hash") != Some(tok.fingerprint().as_str()) {
            return Err(CliError::Usage(format!("{} was trained with a different vocabulary", path.display())));
        }
        Ok(ck)
    }

    /// Learn BPE over the generic corpus and every style corpus.
    pub fn train_bpe(&self) -> CliResult<Tokenizer> {
        self.cfg.check_inputs()?;
        let mut text = formats::read_lines(&self.cfg.generic)?;
        for s in &self.cfg.styles {
            text.extend(formats::read_lines(&s.train)?);
        }
        let tok = Tokenizer::train(&text, self.cfg.merges)?;
        formats::write_bpe(&self.vocab_path(), &tok, &self.stamp())?;
        Ok(tok)
    }

    /// Masked-LM loss on a fixed, seeded masking of the first generic
    /// sentences.
    pub fn validation_loss(&self, lm: &LanguageModel<f32>, corpus: &StyledCorpus) -> CliResult<f64> {
        let mut rng = seeded_rng(self.cfg.seed ^ 0x5eed);
        let v = lm.config().vocab_size;
        let batch: Vec<_> = corpus
            .sentences()
            .iter()
            .take(VALIDATION_SENTENCES)
            .map(|s| apply_mlm_mask(s, &self.cfg.noise, v, &mut rng))
            .collect();
        Ok(lm.mlm_loss(&batch)? as f64)
    }

    /// MLM pretraining with a checkpoint every `pretrain.checkpoint_every`
    /// steps. With `resume`, continues from `base.ckpt` if it exists.
    pub fn pretrain(&self, resume: bool, log: &mut dyn FnMut(usize, f64)) -> CliResult<LanguageModel<f32>> {
        let tok = self.tokenizer()?;
        let corpus = self.corpus(&self.cfg.generic, "generic", "generic", &tok)?;
        let model_cfg = self.cfg.model_for(tok.vocab_size());
        let pc: PretrainConfig = self.cfg.pretrain;
        let (mut lm, mut opt, mut step) = match resume.then(|| self.base_path()).filter(|p| p.exists()) {
            Some(p) => {
                let ck = self.upstream(&p, &tok)?;
                let lm = ck.to_lm(&p)?;
                let opt = ck
                    .adam(model::AdamConfig { lr: pc.lr, ..Default::default() }, &p)?
                    .unwrap_or_else(|| Adam::new(Default::default(), lm.param_count()));
                let step: usize = ck.require("step", &p)?.parse().map_err(|_| CliError::format(&p, "bad step"))?;
                (lm, opt, step)
            }
            None => {
                let lm = LanguageModel::new(model_cfg, AttentionMode::Bidirectional, self.cfg.seed)?;
                let opt = Adam::new(model::AdamConfig { lr: pc.lr, ..Default::default() }, lm.param_count());
                (lm, opt, 0)
            }
        };
        let loss_path = self.path("base.loss");
        if step == 0 {
            formats::write_bytes(&loss_path, b"")?;
        } else {
            formats::truncate_trace(&loss_path, step)?;
        }
        let every = self.cfg.pretrain_checkpoint_every.max(1);
        loop {
            let end = (step + every).min(pc.steps);
            if end > step {
                let chunk = PretrainConfig { steps: end, ..pc };
                let mut lines = Vec::new();
                let r = model::pretrain_mlm(&mut lm, &mut opt, corpus.sentences(), &chunk, step, &mut |s, l| {
                    lines.push(format!("step={s} loss={l:.6}"));
                    log(s, l);
                });
                for l in &lines {
                    formats::append_line(&loss_path, l)?;
                }
                r?;
                step = end;
            }
            let mut ck = self.stamped(Checkpoint::from_lm(&lm, Some(&opt)), &tok, "pretrain");
            ck.set("step", step);
            ck.set("val_loss", format!("{:.9}", self.validation_loss(&lm, &corpus)?));
            ck.write(&self.base_path())?;
            if step >= pc.steps {
                return Ok(lm);
            }
        }
    }

    pub fn load_base(&self, tok: &Tokenizer) -> CliResult<LanguageModel<f32>> {
        let p = self.base_path();
        self.upstream(&p, tok)?.to_lm(&p)
    }

    pub fn load_lm(&self, path: &Path, tok: &Tokenizer) -> CliResult<LanguageModel<f32>> {
        self.upstream(path, tok)?.to_lm(path)
    }

    pub fn load_discriminator(&self, style: &str, tok: &Tokenizer) -> CliResult<StyleDiscriminator<f32>> {
        let p = self.disc_path(style);
        let ck = self.upstream(&p, tok)?;
        let lm = ck.to_lm(&p)?;
        Ok(StyleDiscriminator::from_parts(
            lm,
            ck.require("style.dimension", &p)?,
            ck.require("style.label", &p)?,
            ck.require("style.base_hash", &p)?,
            ck.require("style.corpus_hash", &p)?,
        )?)
    }

    fn save_discriminator(&self, path: &Path, d: &StyleDiscriminator<f32>, tok: &Tokenizer, report: &str) -> CliResult<()> {
        let mut ck = self.stamped(Checkpoint::from_lm(&d.lm, None), tok, "finetune");
        ck.set("style.dimension", &d.dimension);
        ck.set("style.label", &d.label);
        ck.set("style.base_hash", &d.base_fingerprint);
        ck.set("style.corpus_hash", &d.corpus_fingerprint);
        ck.set("finetune.report", report);
        ck.write(path)
    }

    /// Fine-tune one causal LM per configured style (or only `only`), plus
    /// the mixture LM that initializes the transfer decoder and the fluency
    /// LM used by evaluation.
    pub fn finetune_discriminators(&self, only: Option<&str>, log: &mut dyn FnMut(&str)) -> CliResult<()> {
        let tok = self.tokenizer()?;
        let base = self.load_base(&tok)?;
        let names: Vec<&str> = match only {
            Some(n) => vec![self.cfg.style(n).ok_or_else(|| CliError::Usage(format!("unknown style {n}")))?.name.as_str()],
            None => self.cfg.styles.iter().map(|s| s.name.as_str()).collect(),
        };
        for name in names {
            let corpus = self.style_corpus(name, &tok)?;
            let (d, rep) = finetune_discriminator(&base, DiscriminatorCorpus::Styled(&corpus), &self.cfg.finetune, &mut |_, _| {})?;
            let summary = format!(
                "steps:{},initial_loss:{:.4},final_loss:{:.4},best_epoch:{}",
                rep.steps,
                rep.initial_loss,
                rep.final_loss,
                rep.best_epoch.map_or(-1, |e| e as i64)
            );
            self.save_discriminator(&self.disc_path(name), &d, &tok, &summary)?;
            log(&format!("{name}: {summary}"));
        }
        if only.is_some() {
            return Ok(());
        }
        self.finetune_mixture(log)?;
        if self.cfg.fluency {
            let corpora =
                self.cfg.styles.iter().map(|s| self.style_corpus(&s.name, &tok)).collect::<CliResult<Vec<_>>>()?;
            let all = mix_corpora(&corpora, self.cfg.seed)?;
            let (d, rep) = finetune_discriminator(&base, DiscriminatorCorpus::Mixed(&all), &self.cfg.finetune, &mut |_, _| {})?;
            self.save_discriminator(&self.fluency_path(), &d, &tok, &format!("steps:{}", rep.steps))?;
            log(&format!("fluency: steps {}", rep.steps));
        }
        Ok(())
    }

    /// Fine-tune the causal LM on the unlabelled mix of the target corpora.
    /// It initializes the transfer decoder.
    pub fn finetune_mixture(&self, log: &mut dyn FnMut(&str)) -> CliResult<()> {
        if self.cfg.targets.is_empty() {
            return Ok(());
        }
        let tok = self.tokenizer()?;
        let base = self.load_base(&tok)?;
        let corpora = self.cfg.targets.iter().map(|t| self.style_corpus(t, &tok)).collect::<CliResult<Vec<_>>>()?;
        let mixed = mix_corpora(&corpora, self.cfg.seed)?;
        let (d, rep) = finetune_discriminator(&base, DiscriminatorCorpus::Mixed(&mixed), &self.cfg.finetune, &mut |_, _| {})?;
        self.save_discriminator(&self.mixture_path(), &d, &tok, &format!("steps:{}", rep.steps))?;
        log(&format!("mixture: steps {}", rep.steps));
        Ok(())
    }

    /// Joint DAE + multi-discriminator training. Refuses to start unless
    /// the base model, every target discriminator and the mixture LM exist
    /// and share this run's vocabulary.
    pub fn train_transfer(&self, resume: bool, log: &mut dyn FnMut(&transfer::TraceRow)) -> CliResult<EncoderDecoder<f32>> {
        if self.cfg.targets.is_empty() {
            return Err(CliError::Usage("transfer.targets is empty".into()));
        }
        let tok = self.tokenizer()?;
        let base = self.load_base(&tok)?;
        let discs = self.cfg.targets.iter().map(|t| self.load_discriminator(t, &tok)).collect::<CliResult<Vec<_>>>()?;
        let mixture = self.load_lm(&self.mixture_path(), &tok)?;
        let corpora = self.cfg.targets.iter().map(|t| self.style_corpus(t, &tok)).collect::<CliResult<Vec<_>>>()?;
        let mixed = mix_corpora(&corpora, self.cfg.seed)?;
        let tc = &self.cfg.transfer;

        let ckpt_path = self.transfer_path();
        let (mut ed, mut opt, start) = match resume.then_some(&ckpt_path).filter(|p| p.exists()) {
            Some(p) => {
                let ck = self.upstream(p, &tok)?;
                let ed = ck.to_encdec(p)?;
                let opt = ck.adam(tc.adam, p)?.unwrap_or_else(|| Adam::new(tc.adam, ed.param_count()));
                let step: usize = ck.require("step", p)?.parse().map_err(|_| CliError::format(p, "bad step"))?;
                (ed, opt, step)
            }
            None => {
                let ed = EncoderDecoder::build(&base, &mixture, self.cfg.seed)?;
                let opt = Adam::new(tc.adam, ed.param_count());
                (ed, opt, 0)
            }
        };
        let trace = self.trace_path();
        if start == 0 {
            formats::write_bytes(&trace, b"")?;
        } else {
            formats::truncate_trace(&trace, start)?;
        }
        let every = self.cfg.transfer_checkpoint_every.max(1);
        let save = |ed: &EncoderDecoder<f32>, opt: &Adam<f32>, step: usize| -> CliResult<()> {
            let mut ck = self.stamped(Checkpoint::from_encdec(ed, Some(opt)), &tok, "transfer");
            ck.set("step", step);
            ck.set("transfer.targets", self.cfg.targets.join(","));
            ck.write(&ckpt_path)
        };
        let mut io_error = None;
        let r = transfer::train_transfer(&mut ed, &mut opt, &discs, &mixed, tc, start, &mut |row, ed, opt| {
            let written = formats::append_line(&trace, &formats::trace_line(row, &tok))
                .and_then(|_| if row.step % every == 0 { save(ed, opt, row.step) } else { Ok(()) });
            log(row);
            written.map_err(|e| {
                let msg = e.to_string();
                io_error = Some(e);
                Error::Config(msg)
            })
        });
        if let Some(e) = io_error {
            return Err(e);
        }
        r?;
        save(&ed, &opt, tc.steps.max(start))?;
        Ok(ed)
    }

    pub fn load_transfer(&self, tok: &Tokenizer) -> CliResult<EncoderDecoder<f32>> {
        let p = self.transfer_path();
        self.upstream(&p, tok)?.to_encdec(&p)
    }

    /// Greedy rewrite of every line. Blank lines stay blank so the output
    /// lines up with the input.
    pub fn transfer_lines<S: AsRef<str>>(&self, lines: &[S]) -> CliResult<Vec<String>> {
        let tok = self.tokenizer()?;
        let ed = self.load_transfer(&tok)?;
        lines
            .iter()
            .map(|l| {
                if l.as_ref().trim().is_empty() {
                    Ok(String::new())
                } else {
                    Ok(transfer::transfer(&ed, l.as_ref(), &tok, &self.cfg.transfer)?)
                }
            })
            .collect()
    }

    pub fn transfer_file(&self, input: &Path, output: &Path) -> CliResult<usize> {
        let lines = formats::read_lines(input)?;
        let out = self.transfer_lines(&lines)?;
        formats::write_lines(output, &out)?;
        Ok(out.len())
    }

    /// One classifier per target dimension, trained on every configured
    /// style of that dimension.
    pub fn classifiers(&self) -> CliResult<Vec<(String, String, NGramStyleClassifier)>> {
        let mut out = Vec::new();
        for t in &self.cfg.targets {
            let target = self.cfg.style(t).unwrap();
            let mut data = Vec::new();
            for s in self.cfg.styles.iter().filter(|s| s.dimension == target.dimension) {
                for line in formats::read_lines(&s.train)? {
                    if !line.trim().is_empty() {
                        data.push((line, s.label.clone()));
                    }
                }
            }
            let (clf, _) = train_style_classifier(&data, &self.cfg.classifier)
                .map_err(|e| CliError::Usage(format!("classifier for dimension {}: {e}", target.dimension)))?;
            out.push((target.dimension.clone(), target.label.clone(), clf));
        }
        Ok(out)
    }

    /// Score `outputs` against `inputs` (and optional reference sets) and
    /// write `report.txt` and `report.jsonl`.
    pub fn evaluate<S: AsRef<str>>(&self, inputs: &[S], outputs: &[S], references: Option<&[Vec<S>]>) -> CliResult<EvalReport> {
        if inputs.len() != outputs.len() {
            return Err(CliError::Usage(format!(
                "inputs have {} lines but outputs have {}",
                inputs.len(),
                outputs.len()
            )));
        }
        if let Some(r) = references {
            if r.len() != outputs.len() {
                return Err(CliError::Usage(format!("references have {} lines but outputs have {}", r.len(), outputs.len())));
            }
        }
        let classifiers = self.classifiers()?;
        let targets: Vec<StyleTarget<'_>> =
            classifiers.iter().map(|(d, l, c)| StyleTarget { dimension: d, classifier: c, label: l }).collect();
        let lexicon = match &self.cfg.lexicon {
            Some((p, target)) => Some((formats::read_lexicon(p)?, *target)),
            None => None,
        };
        let tok = self.tokenizer()?;
        let fluency = if self.fluency_path().exists() { Some(self.load_lm(&self.fluency_path(), &tok)?) } else { None };
        let report = eval::evaluate(&eval::EvalInputs {
            inputs,
            outputs,
            references,
            targets: &targets,
            lexicon: lexicon.as_ref().map(|(l, t)| (l, *t)),
            fluency: fluency.as_ref().map(|f| (f, &tok)),
            bleu: self.cfg.bleu,
        })?;
        let stamp = self.stamp();
        formats::write_bytes(&self.path("report.txt"), formats::report_text(&report, &stamp).as_bytes())?;
        formats::write_lines(&self.path("report.jsonl"), &[formats::report_json(&report, &stamp)])?;
        Ok(report)
    }

    /// Perplexity of a text file under a saved causal LM.
    pub fn perplexity_of(&self, lm: &LanguageModel<f32>, path: &Path, tok: &Tokenizer) -> CliResult<f64> {
        let seqs: Vec<TokenSequence> = self.corpus(path, "", "", tok)?.sentences().to_vec();
        Ok(perplexity(lm, &seqs)?)
    }
}
