//! Acceptance battery. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion failed. The end-to-end synthetic run dominates
//! the runtime.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use style_forge::config::parse_pairs;
use style_forge::synthetic::{oracle_case, oracle_marker, write_task, TaskSizes, DIM_CASE};
use style_forge::{formats, Run, RunConfig};
use style_forge_core::corpus::{apply_dae_noise, apply_mlm_mask, MaskAction, NoiseConfig};
use style_forge_core::discriminator::{perplexity, style_reward, StyleDiscriminator};
use style_forge_core::eval::{
    bleu, bleu_stats, corpus_bleu, lexical_formality_score, BleuConfig, Formality, FormalityLexicon,
};
use style_forge_core::model::{AttentionMode, Decoding, EncoderDecoder, LanguageModel, Seq2SeqItem, TransformerConfig};
use style_forge_core::tokenizer::{special, TokenSequence};
use style_forge_core::seeded_rng;
use style_forge_core::transfer::{reinforce_gradient, score_sample};

#[derive(Default)]
struct Board {
    failed: Vec<u32>,
}

impl Board {
    fn report(&mut self, id: u32, pass: bool, what: &str, detail: String) {
        println!("{} {id}. {what}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

/// `base` with every key in `overrides` replaced.
fn configure(base: &str, overrides: &[(&str, String)]) -> String {
    let mut pairs = parse_pairs(base).unwrap();
    for (k, v) in overrides {
        pairs.insert(k.to_string(), v.clone());
    }
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn run_with(dir: &Path, text: &str) -> Run {
    Run::new(RunConfig::parse(text, dir, None).unwrap())
}

fn own_label(dimension: &str, sentence: &str) -> Option<&'static str> {
    if dimension == DIM_CASE {
        oracle_case(sentence)
    } else {
        oracle_marker(sentence)
    }
}

fn is_joint_target(s: &str) -> bool {
    oracle_case(s) == Some("upper") && oracle_marker(s) == Some("bang")
}

fn self_bleu(inputs: &[String], outputs: &[String], cfg: &BleuConfig) -> f64 {
    let refs: Vec<Vec<&str>> = inputs.iter().map(|i| vec![i.as_str()]).collect();
    let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    corpus_bleu(&outs, &refs, cfg).unwrap()
}

/// Criteria 1, 2 and 7 on one synthetic run, plus the cascaded comparison.
fn synthetic_pipeline(board: &mut Board, dir: &Path) -> Run {
    let conf = write_task(dir, TaskSizes::default(), 2024).unwrap();
    let text = fs::read_to_string(&conf).unwrap();
    let run = run_with(dir, &text);
    let cfg = &run.cfg;
    let t0 = Instant::now();

    run.train_bpe().unwrap();
    run.pretrain(false, &mut |_, _| {}).unwrap();
    run.finetune_discriminators(None, &mut |m| eprintln!("  finetune {m}")).unwrap();
    let stage1 = t0.elapsed();
    let tok = run.tokenizer().unwrap();

    let mut worst = f64::INFINITY;
    let mut ordered = true;
    let mut detail = Vec::new();
    for s in &cfg.styles {
        let opposite = cfg.styles.iter().find(|o| o.dimension == s.dimension && o.name != s.name).unwrap();
        let d = run.load_discriminator(&s.name, &tok).unwrap();
        let same = run.perplexity_of(&d.lm, s.test.as_ref().unwrap(), &tok).unwrap();
        let other = run.perplexity_of(&d.lm, opposite.test.as_ref().unwrap(), &tok).unwrap();
        let margin = (other - same) / other;
        ordered &= same < other;
        worst = worst.min(margin);
        detail.push(format!("{} {same:.2}<{other:.2}", s.name));
    }
    board.report(
        1,
        ordered && worst >= 0.10 && stage1 <= Duration::from_secs(600),
        "perplexity ordering",
        format!("{}; min margin {:.1}%; {:.1} min", detail.join(", "), worst * 100.0, minutes(stage1)),
    );

    let mut rng = seeded_rng(cfg.seed);
    let mut rates = Vec::new();
    for s in &cfg.styles {
        let d = run.load_discriminator(&s.name, &tok).unwrap();
        let n = 200;
        let own = (0..n)
            .filter(|_| {
                let x = d.lm.sample(run.cfg.max_len, 1.0, &mut rng).unwrap();
                own_label(&s.dimension, &tok.decode(&x).unwrap()) == Some(s.label.as_str())
            })
            .count();
        rates.push((s.name.clone(), own as f64 / n as f64));
    }
    let min_rate = rates.iter().map(|r| r.1).fold(1.0, f64::min);
    let shown: Vec<String> = rates.iter().map(|(n, r)| format!("{n} {:.1}%", r * 100.0)).collect();
    board.report(
        2,
        min_rate > 0.9,
        "discriminator samples carry their style",
        format!("{} (200 samples each, synthetic target >90%)", shown.join(", ")),
    );

    run.train_transfer(false, &mut |row| {
        if row.step % 200 == 0 {
            eprintln!("  transfer step {} l_dae {:.3}", row.step, row.l_dae);
        }
    })
    .unwrap();
    let mut inputs = Vec::new();
    for s in &cfg.styles {
        inputs.extend(formats::read_lines(s.test.as_ref().unwrap()).unwrap());
    }
    let outputs = run.transfer_lines(&inputs).unwrap();
    let report = run.evaluate(&inputs, &outputs, None).unwrap();
    let total = t0.elapsed();
    let joint = outputs.iter().filter(|o| is_joint_target(o)).count() as f64 / outputs.len() as f64;
    let bleu_joint = self_bleu(&inputs, &outputs, &cfg.bleu);
    board.report(
        7,
        joint >= 0.8 && bleu_joint >= 0.5 && total <= Duration::from_secs(45 * 60),
        "end-to-end multi-style transfer",
        format!(
            "{} held-out sentences, joint oracle accuracy {:.1}%, self-BLEU {bleu_joint:.3}, classifier joint accuracy {:.1}%, {:.1} min",
            outputs.len(),
            joint * 100.0,
            report.joint_accuracy.unwrap_or(f64::NAN),
            minutes(total)
        ),
    );

    let mut cascaded = inputs.clone();
    for (i, target) in cfg.targets.iter().enumerate() {
        let out = dir.join(format!("cascade-{target}"));
        fs::create_dir_all(&out).unwrap();
        for f in ["vocab.bpe", "base.ckpt", &format!("disc-{target}.ckpt")] {
            fs::copy(run.path(f), out.join(f)).unwrap();
        }
        let single = configure(
            &text,
            &[
                ("paths.output_dir", out.display().to_string()),
                ("transfer.targets", target.clone()),
                ("transfer.lambdas", cfg.transfer.lambdas[i].to_string()),
            ],
        );
        let r = run_with(dir, &single);
        r.finetune_mixture(&mut |_| {}).unwrap();
        r.train_transfer(false, &mut |_| {}).unwrap();
        cascaded = r.transfer_lines(&cascaded).unwrap();
    }
    let joint_c = cascaded.iter().filter(|o| is_joint_target(o)).count() as f64 / cascaded.len() as f64;
    let bleu_c = self_bleu(&inputs, &cascaded, &cfg.bleu);
    println!(
        "INFO 7. cascaded single-style models: joint oracle accuracy {:.1}%, self-BLEU {bleu_c:.3}; joint model {} on accuracy, {} on self-BLEU",
        joint_c * 100.0,
        if joint > joint_c { "ahead" } else { "not ahead" },
        if bleu_joint > bleu_c { "ahead" } else { "not ahead" },
    );
    run
}

fn toy_config(vocab_size: usize) -> TransformerConfig {
    TransformerConfig { num_layers: 1, hidden_size: 8, num_heads: 2, dropout: 0.0, max_positions: 8, vocab_size }
}

/// Criteria 3 and 4 on a generator that can only emit two words and EOS,
/// at most two tokens long.
fn reinforce_estimator(board: &mut Board) {
    let t0 = Instant::now();
    let cfg = toy_config(7);
    let (a, b) = (5u32, 6u32);
    let ed = EncoderDecoder::<f64>::new(cfg, 11).unwrap().with_output_support(&[a, b, special::EOS]).unwrap();
    let lm = LanguageModel::<f64>::new(cfg, AttentionMode::Causal, 12).unwrap();
    let disc = StyleDiscriminator::from_parts(lm, "toy", "t", "", "").unwrap();
    let x = TokenSequence::framed(&[a, b]);
    let max_len = 2;

    let mut outputs = vec![TokenSequence::new(vec![special::EOS])];
    for t in [a, b] {
        outputs.push(TokenSequence::new(vec![t, special::EOS]));
        for u in [a, b] {
            outputs.push(TokenSequence::new(vec![t, u]));
        }
    }
    let r_x = style_reward(&disc, &x, false).unwrap();
    let advantages: Vec<f64> = outputs.iter().map(|o| style_reward(&disc, o, false).unwrap() - r_x).collect();
    let log_probs = |m: &EncoderDecoder<f64>| -> Vec<f64> {
        let items: Vec<_> = outputs.iter().map(|o| Seq2SeqItem { source: 0, target: o, weight: 1.0 }).collect();
        m.log_probs(std::slice::from_ref(&x), &items).unwrap()
    };
    let mass: f64 = log_probs(&ed).iter().map(|lp| lp.exp()).sum();
    assert!((mass - 1.0).abs() < 1e-12, "enumeration misses outputs: mass {mass}");
    // Expected surrogate loss is -sum P(x')A(x'); its gradient by central
    // differences is the exact expected REINFORCE gradient.
    let objective = |m: &EncoderDecoder<f64>| -> f64 {
        -log_probs(m).iter().zip(&advantages).map(|(lp, adv)| lp.exp() * adv).sum::<f64>()
    };
    let n = ed.param_count();
    let h = 1e-5;
    let mut probe = ed.clone();
    let exact: Vec<f64> = (0..n)
        .map(|i| {
            let v = probe.params().data()[i];
            probe.params_mut().data_mut()[i] = v + h;
            let up = objective(&probe);
            probe.params_mut().data_mut()[i] = v - h;
            let down = objective(&probe);
            probe.params_mut().data_mut()[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect();

    let samples = 50_000;
    let mut rng = seeded_rng(99);
    let (mut sum, mut sq, mut sq_plain) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut sum_plain = vec![0.0; n];
    for _ in 0..samples {
        let o = ed.generate(&x, max_len, Decoding::Sample { temperature: 1.0 }, &mut rng).unwrap();
        let s = score_sample(&ed, &disc, &x, &x, o, false).unwrap();
        let g = reinforce_gradient(&ed, &x, &s).unwrap();
        let mut plain = s.clone();
        plain.record.advantage = plain.record.r_sample;
        let g0 = reinforce_gradient(&ed, &x, &plain).unwrap();
        for i in 0..n {
            sum[i] += g[i];
            sq[i] += g[i] * g[i];
            sum_plain[i] += g0[i];
            sq_plain[i] += g0[i] * g0[i];
        }
    }
    let m = samples as f64;
    let var = |s: f64, q: f64| (q / m - (s / m) * (s / m)).max(0.0) * m / (m - 1.0);
    let mut within = 0;
    let z: Vec<f64> = (0..n)
        .map(|i| {
            let se = (var(sum[i], sq[i]) / m).sqrt();
            let diff = (sum[i] / m - exact[i]).abs();
            if diff <= 3.0 * se + 1e-12 {
                within += 1;
            }
            if se > 0.0 {
                diff / se
            } else if diff <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut top: Vec<usize> = (0..n).collect();
    top.sort_by(|&i, &j| exact[j].abs().total_cmp(&exact[i].abs()));
    top.truncate(20);
    let worst_top = top.iter().map(|&i| z[i]).fold(0.0, f64::max);
    let share = within as f64 / n as f64;
    let elapsed = t0.elapsed();
    board.report(
        3,
        worst_top <= 3.0 && share >= 0.99 && elapsed <= Duration::from_secs(300),
        "REINFORCE estimate matches the enumerated gradient",
        format!(
            "{} outputs enumerated, {samples} samples; 20 largest-gradient parameters within {worst_top:.2} SE; {:.1}% of all {n} within 3 SE; {:.1} s",
            outputs.len(),
            share * 100.0,
            elapsed.as_secs_f64()
        ),
    );

    let total_var: f64 = (0..n).map(|i| var(sum[i], sq[i])).sum();
    let total_plain: f64 = (0..n).map(|i| var(sum_plain[i], sq_plain[i])).sum();
    board.report(
        4,
        total_var <= total_plain,
        "baseline reduces estimator variance",
        format!("summed per-sample variance {total_var:.4e} with r(x) vs {total_plain:.4e} without"),
    );
}

fn gradient_error(loss: &dyn Fn(&[f64]) -> f64, params: &[f64], grad: &[f64]) -> (usize, f64) {
    let h = 1e-5;
    let mut p = params.to_vec();
    let candidates: Vec<usize> = (0..params.len()).filter(|&i| grad[i].abs() >= 1e-4).collect();
    let step = (candidates.len() / 30).max(1);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for &i in candidates.iter().step_by(step).take(30) {
        let v = p[i];
        p[i] = v + h;
        let up = loss(&p);
        p[i] = v - h;
        let down = loss(&p);
        p[i] = v;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()));
        checked += 1;
    }
    (checked, worst)
}

fn gradient_checks(board: &mut Board) {
    let cfg = toy_config(12);
    let seqs: Vec<TokenSequence> =
        (0..4u32).map(|i| TokenSequence::framed(&[5 + i, 6 + (i * 3) % 6, 7 + (i * 5) % 5, 5 + (i * 2) % 7])).collect();
    let noise = NoiseConfig { mlm_select: 0.5, ..NoiseConfig::default() };
    let mut rng = seeded_rng(3);
    let masked: Vec<_> = seqs.iter().map(|s| apply_mlm_mask(s, &noise, cfg.vocab_size, &mut rng)).collect();
    let noisy: Vec<_> =
        seqs.iter().map(|s| apply_dae_noise(s, &NoiseConfig { p_drop: 0.2, p_mask: 0.2, ..noise }, &mut rng)).collect();

    let with = |m: &LanguageModel<f64>, p: &[f64]| {
        let mut m = m.clone();
        m.params_mut().data_mut().copy_from_slice(p);
        m
    };
    let mlm = LanguageModel::<f64>::new(cfg, AttentionMode::Bidirectional, 1).unwrap();
    let (_, g) = mlm.mlm_loss_grad(&masked, None).unwrap();
    let r_mlm = gradient_error(&|p| with(&mlm, p).mlm_loss(&masked).unwrap(), mlm.params().data(), &g);

    let clm = LanguageModel::<f64>::new(cfg, AttentionMode::Causal, 2).unwrap();
    let (_, g) = clm.clm_loss_grad(&seqs, None).unwrap();
    let r_clm = gradient_error(&|p| with(&clm, p).clm_loss(&seqs).unwrap(), clm.params().data(), &g);

    let ed = EncoderDecoder::<f64>::new(cfg, 3).unwrap();
    let w = 1.0 / seqs.len() as f64;
    let items: Vec<_> = seqs.iter().enumerate().map(|(i, s)| Seq2SeqItem { source: i, target: s, weight: w }).collect();
    let (_, g) = ed.weighted_nll_grad(&noisy, &items, None).unwrap();
    let r_dae = gradient_error(
        &|p| {
            let mut m = ed.clone();
            m.params_mut().data_mut().copy_from_slice(p);
            m.dae_loss(&noisy, &seqs).unwrap()
        },
        ed.params().data(),
        &g,
    );

    let all = [("mlm", r_mlm), ("clm", r_clm), ("dae", r_dae)];
    let pass = all.iter().all(|(_, (n, e))| *n >= 20 && *e <= 1e-4);
    let shown: Vec<String> = all.iter().map(|(k, (n, e))| format!("{k} {n} params max rel {e:.1e}")).collect();
    board.report(5, pass, "finite-difference gradient checks", shown.join(", "));
}

fn masking_statistics(board: &mut Board) {
    let mut rng = seeded_rng(6);
    let vocab = 1000;
    let noise = NoiseConfig::default();
    let (mut tokens, mut selected, mut kept) = (0usize, 0usize, 0usize);
    let mut actions = [0usize; 3];
    while tokens < 120_000 {
        let content: Vec<u32> = (0..24).map(|i| (special::COUNT as u32) + (tokens as u32 + i * 37) % 900).collect();
        let s = TokenSequence::framed(&content);
        let ex = apply_mlm_mask(&s, &noise, vocab, &mut rng);
        selected += ex.targets.len();
        for t in &ex.targets {
            actions[match t.action {
                MaskAction::Mask => 0,
                MaskAction::Random => 1,
                MaskAction::Keep => 2,
            }] += 1;
        }
        kept += apply_dae_noise(&s, &noise, &mut rng).content().len();
        tokens += content.len();
    }
    let rate = selected as f64 / tokens as f64;
    let split: Vec<f64> = actions.iter().map(|&c| c as f64 / selected as f64).collect();
    let survival = kept as f64 / tokens as f64;
    let pass = (rate - noise.mlm_select).abs() <= 0.01
        && (split[0] - noise.mlm_mask_frac).abs() <= 0.02
        && (split[1] - noise.mlm_random_frac).abs() <= 0.02
        && (split[2] - noise.mlm_keep_frac).abs() <= 0.02
        && (survival - (1.0 - noise.p_drop)).abs() <= 0.01;
    board.report(
        6,
        pass,
        "masking statistics",
        format!(
            "{tokens} tokens, selected {rate:.4}, mask/random/keep {:.3}/{:.3}/{:.3}, DAE survival {survival:.4}",
            split[0], split[1], split[2]
        ),
    );
}

fn metric_oracles(board: &mut Board) {
    let cand: Vec<&str> = "the the the the the the the".split(' ').collect();
    let refs = vec!["the cat is on the mat".split(' ').collect::<Vec<_>>()];
    let cfg = BleuConfig { max_n: 4, lowercase: false };
    let stats = bleu_stats(&cand, &refs, &cfg).unwrap();
    let unigram = bleu(&cand, &refs, &BleuConfig { max_n: 1, lowercase: false }).unwrap();
    let full = bleu(&cand, &refs, &cfg).unwrap();
    let hand = (2.0f64 / 7.0 * (1.0 / 7.0) * (1.0 / 6.0) * (1.0 / 5.0)).powf(0.25);
    let bleu_ok = stats.matches[0] == 2 && stats.totals[0] == 7 && (unigram - 2.0 / 7.0).abs() < 1e-12 && (full - hand).abs() < 1e-12;

    let lex = FormalityLexicon::new([("therefore".to_string(), 0.8), ("gonna".to_string(), -0.9), ("meeting".to_string(), 0.1)])
        .unwrap();
    let flip_ok = ["therefore the meeting", "gonna skip the meeting", "Therefore, gonna!"].iter().all(|s| {
        let f = lexical_formality_score(s, &lex, Formality::Formal).unwrap();
        let i = lexical_formality_score(s, &lex, Formality::Informal).unwrap();
        (f + i - 100.0).abs() < 1e-9
    });

    let v = 37;
    let uniform = LanguageModel::<f64>::zeros(toy_config(v), AttentionMode::Causal).unwrap();
    let corpus: Vec<TokenSequence> = (0..5u32).map(|i| TokenSequence::framed(&[5 + i, 9, 20 + i])).collect();
    let ppl = perplexity(&uniform, &corpus).unwrap();
    let ppl_ok = (ppl / v as f64 - 1.0).abs() < 1e-9;
    board.report(
        8,
        bleu_ok && flip_ok && ppl_ok,
        "metric oracles",
        format!(
            "clipped unigram {}/{} and BLEU {full:.6} vs hand {hand:.6}; formal+informal=100 {}; uniform perplexity {ppl:.9} vs {v}",
            stats.matches[0],
            stats.totals[0],
            if flip_ok { "holds" } else { "broken" }
        ),
    );
}

const SMALL: &[(&str, &str)] = &[
    ("tokenizer.merges", "150"),
    ("model.num_layers", "1"),
    ("model.hidden_size", "16"),
    ("model.num_heads", "2"),
    ("model.max_positions", "16"),
    ("pretrain.steps", "20"),
    ("pretrain.batch_size", "8"),
    ("finetune.max_steps", "6"),
    ("finetune.batch_size", "8"),
    ("transfer.steps", "8"),
    ("transfer.batch_size", "4"),
    ("transfer.dae_warmup_steps", "3"),
    ("transfer.max_len", "12"),
];

/// Every stage of a small run, twice, plus a repeat of the full run's
/// evaluation.
fn determinism(board: &mut Board, dir: &Path, full: &Run) {
    let conf = write_task(dir, TaskSizes { generic: 200, train: 80, test: 20 }, 8).unwrap();
    let text = fs::read_to_string(&conf).unwrap();
    let mut artifacts: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for attempt in 0..2 {
        let overrides: Vec<(&str, String)> = SMALL
            .iter()
            .map(|(k, v)| (*k, v.to_string()))
            .chain([("paths.output_dir", format!("run{attempt}"))])
            .collect();
        let run = run_with(dir, &configure(&text, &overrides));
        run.train_bpe().unwrap();
        run.pretrain(false, &mut |_, _| {}).unwrap();
        run.finetune_discriminators(None, &mut |_| {}).unwrap();
        run.train_transfer(false, &mut |_| {}).unwrap();
        let inputs = formats::read_lines(&dir.join("lower.test.txt")).unwrap();
        let outputs = run.transfer_lines(&inputs).unwrap();
        run.evaluate(&inputs, &outputs, None).unwrap();
        let mut files: Vec<PathBuf> = fs::read_dir(&run.cfg.output_dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        artifacts.push(files.iter().map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap())).collect());
    }
    let small_ok = artifacts[0] == artifacts[1];

    let report = full.path("report.txt");
    let first = fs::read(&report).unwrap();
    let mut inputs = Vec::new();
    for s in &full.cfg.styles {
        inputs.extend(formats::read_lines(s.test.as_ref().unwrap()).unwrap());
    }
    let outputs = full.transfer_lines(&inputs).unwrap();
    full.evaluate(&inputs, &outputs, None).unwrap();
    let full_ok = fs::read(&report).unwrap() == first;
    board.report(
        9,
        small_ok && full_ok,
        "determinism",
        format!(
            "{} artifacts of a repeated small run {}; repeated synthetic evaluation {}",
            artifacts[0].len(),
            if small_ok { "byte-identical" } else { "differ" },
            if full_ok { "byte-identical" } else { "differs" }
        ),
    );
}

fn main() -> ExitCode {
    let mut board = Board::default();
    let work = tempfile::tempdir().unwrap();
    reinforce_estimator(&mut board);
    gradient_checks(&mut board);
    masking_statistics(&mut board);
    metric_oracles(&mut board);
    let full = synthetic_pipeline(&mut board, &work.path().join("synthetic"));
    determinism(&mut board, &work.path().join("small"), &full);
    if board.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {:?}", board.failed);
        ExitCode::FAILURE
    }
}
