//! Stage contracts of the command-line workflow on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use style_forge::config::parse_pairs;
use style_forge::formats::{self, Checkpoint};
use style_forge::synthetic::{write_task, TaskSizes};
use style_forge::{Run, RunConfig};

const TINY: &str = "\
tokenizer.merges=120
model.num_layers=1
model.hidden_size=16
model.num_heads=2
model.max_positions=16
pretrain.steps=30
pretrain.batch_size=8
pretrain.warmup_steps=5
pretrain.lr=0.003
pretrain.checkpoint_every=10
finetune.epochs=1
finetune.max_steps=6
finetune.batch_size=8
transfer.steps=6
transfer.batch_size=4
transfer.max_len=12
transfer.dae_warmup_steps=2
transfer.checkpoint_every=3
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_style-forge"))
}

fn task(dir: &Path) -> PathBuf {
    let conf = write_task(dir, TaskSizes { generic: 120, train: 60, test: 10 }, 5).unwrap();
    let mut pairs = parse_pairs(&fs::read_to_string(&conf).unwrap()).unwrap();
    pairs.extend(parse_pairs(TINY).unwrap());
    fs::write(&conf, pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect::<String>()).unwrap();
    conf
}

fn run_of(conf: &Path) -> Run {
    Run::new(RunConfig::parse(&fs::read_to_string(conf).unwrap(), conf.parent().unwrap(), None).unwrap())
}

fn full_run(conf: &Path) -> Run {
    let run = run_of(conf);
    run.train_bpe().unwrap();
    run.pretrain(false, &mut |_, _| {}).unwrap();
    run.finetune_discriminators(None, &mut |_| {}).unwrap();
    run.train_transfer(false, &mut |_| {}).unwrap();
    run
}

#[test]
fn vocab_header_and_byte_identical_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let conf = task(dir.path());
    let out = bin().args(["train-bpe", "--config"]).arg(&conf).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let vocab = dir.path().join("run/vocab.bpe");
    let first = fs::read(&vocab).unwrap();
    let (tok, stamp) = formats::read_bpe(&vocab).unwrap();
    assert!(String::from_utf8_lossy(&first).starts_with(&format!("BPE v1 {}\n", tok.vocab_size())));
    assert_eq!(stamp.seed, 5);
    bin().args(["train-bpe", "--config"]).arg(&conf).status().unwrap();
    assert_eq!(fs::read(&vocab).unwrap(), first);
}

#[test]
fn missing_corpus_is_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let conf = task(dir.path());
    fs::remove_file(dir.path().join("bang.train.txt")).unwrap();
    let out = bin().args(["train-bpe", "--config"]).arg(&conf).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bang.train.txt"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let conf = task(dir.path());
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "paths.generic=generic.txt\nmodel.colour=blue\n").unwrap();
    assert_eq!(bin().args(["train-bpe", "--config"]).arg(&bad).status().unwrap().code(), Some(1));
    let out = bin().args(["pretrain", "--config"]).arg(&conf).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-bpe"));
}

#[test]
fn pretraining_learns_reloads_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = task(dir.path());
    let run = run_of(&conf);
    run.train_bpe().unwrap();
    let mut losses = Vec::new();
    let lm = run.pretrain(false, &mut |_, l| losses.push(l)).unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");

    let ck = Checkpoint::read(&run.base_path()).unwrap();
    assert_eq!(ck.get("step"), Some("30"));
    let reloaded = ck.to_lm(&run.base_path()).unwrap();
    let tok = run.tokenizer().unwrap();
    let corpus = run.corpus(&run.cfg.generic, "g", "g", &tok).unwrap();
    let stored: f64 = ck.get("val_loss").unwrap().parse().unwrap();
    assert!((run.validation_loss(&reloaded, &corpus).unwrap() - stored).abs() < 1e-6);
    assert_eq!(reloaded.fingerprint(), lm.fingerprint());

    // Resume from the step-20 checkpoint of an identical run.
    let dir2 = tempfile::tempdir().unwrap();
    let conf2 = task(dir2.path());
    let text = fs::read_to_string(&conf2).unwrap().replace("pretrain.steps=30", "pretrain.steps=20");
    fs::write(&conf2, &text).unwrap();
    let short = run_of(&conf2);
    short.train_bpe().unwrap();
    short.pretrain(false, &mut |_, _| {}).unwrap();
    fs::write(&conf2, text.replace("pretrain.steps=20", "pretrain.steps=30")).unwrap();
    let mut steps = Vec::new();
    let resumed = run_of(&conf2).pretrain(true, &mut |s, _| steps.push(s)).unwrap();
    assert_eq!(steps, (21..=30).collect::<Vec<_>>());
    assert_eq!(resumed.fingerprint(), lm.fingerprint());
    let curve = formats::read_lines(&dir2.path().join("run/base.loss")).unwrap();
    assert_eq!(curve.len(), 30);
}

#[test]
fn full_workflow_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let conf = task(dir.path());
    let run = full_run(&conf);
    let tok = run.tokenizer().unwrap();

    // One discriminator per style, each carrying its style in the header.
    for s in &run.cfg.styles {
        let ck = Checkpoint::read(&run.disc_path(&s.name)).unwrap();
        assert_eq!(ck.get("style.label"), Some(s.label.as_str()));
        assert_eq!(ck.get("style.dimension"), Some(s.dimension.as_str()));
        assert_eq!(ck.get("config_hash"), Some(run.cfg.hash()));
        assert_eq!(ck.get("mode"), Some("causal"));
    }
    assert_eq!(formats::read_lines(&run.trace_path()).unwrap().len(), 6);
    let ck = Checkpoint::read(&run.transfer_path()).unwrap();
    assert_eq!(ck.get("step"), Some("6"));
    assert_eq!(ck.get("vocab_hash"), Some(tok.fingerprint().as_str()));

    // transfer: aligned, deterministic, vacuous on empty input.
    let input = dir.path().join("lower.test.txt");
    let out1 = dir.path().join("o1.txt");
    let out2 = dir.path().join("o2.txt");
    for o in [&out1, &out2] {
        let s = bin().args(["transfer", "--config"]).arg(&conf).arg("--input").arg(&input).arg("--output").arg(o).status();
        assert!(s.unwrap().success());
    }
    let ins = formats::read_lines(&input).unwrap();
    let outs = formats::read_lines(&out1).unwrap();
    assert_eq!(ins.len(), outs.len());
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let eo = dir.path().join("eo.txt");
    let s = bin().args(["transfer", "--config"]).arg(&conf).arg("--input").arg(&empty).arg("--output").arg(&eo).status();
    assert!(s.unwrap().success());
    assert_eq!(fs::read_to_string(&eo).unwrap(), "");

    // evaluate: every metric family with references, ref-BLEU absent without.
    let mut text = fs::read_to_string(&conf).unwrap();
    text.push_str("paths.lexicon=lex.tsv\n");
    fs::write(dir.path().join("lex.tsv"), formats::BUILTIN_LEXICON).unwrap();
    fs::write(&conf, text).unwrap();
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(&conf)
        .arg("--inputs")
        .arg(&input)
        .arg("--outputs")
        .arg(&out1)
        .arg("--refs")
        .arg(&input)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("run/report.txt")).unwrap();
    for key in ["style_accuracy.case.upper=", "style_accuracy.marker.bang=", "lexical_formality=", "self_bleu=", "fluency_perplexity="] {
        assert!(report.contains(key), "{key} missing from\n{report}");
    }
    assert!(!report.contains("ref_bleu=none"));
    let json: serde_json::Value =
        serde_json::from_str(fs::read_to_string(dir.path().join("run/report.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(json["seed"], 5);

    let r = run_of(&conf).evaluate(&ins, &outs, None).unwrap();
    assert!(r.ref_bleu.is_none());

    let short = dir.path().join("short.txt");
    fs::write(&short, "ONE LINE !\n").unwrap();
    let out = bin().args(["evaluate", "--config"]).arg(&conf).arg("--inputs").arg(&input).arg("--outputs").arg(&short).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lines"));
}

#[test]
fn transfer_training_requires_every_discriminator() {
    let dir = tempfile::tempdir().unwrap();
    let conf = task(dir.path());
    let run = run_of(&conf);
    run.train_bpe().unwrap();
    run.pretrain(false, &mut |_, _| {}).unwrap();
    run.finetune_discriminators(None, &mut |_| {}).unwrap();
    fs::remove_file(run.disc_path("bang")).unwrap();
    let out = bin().args(["train-transfer", "--config"]).arg(&conf).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("disc-bang.ckpt"));
    assert!(!run.trace_path().exists());

    // A discriminator from another vocabulary is refused as well.
    run.finetune_discriminators(Some("bang"), &mut |_| {}).unwrap();
    let mut ck = Checkpoint::read(&run.disc_path("upper")).unwrap();
    ck.set("vocab_hash", "0000");
    ck.write(&run.disc_path("upper")).unwrap();
    let err = run.train_transfer(false, &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("different vocabulary"));
}

#[test]
fn make_synthetic_writes_the_task() {
    let dir = tempfile::tempdir().unwrap();
    let s = bin().args(["make-synthetic", "--generic", "50", "--train", "30", "--test", "5", "--out"]).arg(dir.path()).status();
    assert!(s.unwrap().success());
    for f in ["generic.txt", "upper.train.txt", "dot.test.txt", "synthetic.conf"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(formats::read_lines(&dir.path().join("upper.test.txt")).unwrap().len(), 5);
    RunConfig::load(&dir.path().join("synthetic.conf")).unwrap();
}
