use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use style_forge::formats;
use style_forge::synthetic::{write_task, TaskSizes};
use style_forge::{CliError, CliResult, Run, RunConfig};

#[derive(Parser)]
#[command(name = "style-forge", version, about = "Multi-style text transfer with language-model discriminators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the two-dimension synthetic corpora and a matching config
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4000)]
        generic: usize,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
    },
    /// Learn the BPE vocabulary
    TrainBpe {
        #[arg(long)]
        config: PathBuf,
    },
    /// Masked-LM pretraining on the generic corpus
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the last checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune one causal LM discriminator per style
    FinetuneDisc {
        #[arg(long)]
        config: PathBuf,
        /// Only this style
        #[arg(long)]
        style: Option<String>,
    },
    /// Joint denoising + discriminator-reward training
    TrainTransfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Rewrite every line of a file
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score transferred sentences
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        /// Reference file, one line per output; repeat for several references
        #[arg(long = "refs")]
        refs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let load = |p: &PathBuf| RunConfig::load(p).map(Run::new);
    match cli.command {
        Command::MakeSynthetic { out, seed, generic, train, test } => {
            let conf = write_task(&out, TaskSizes { generic, train, test }, seed).map_err(|e| CliError::io(&out, e))?;
            println!("wrote {}", conf.display());
        }
        Command::TrainBpe { config } => {
            let run = load(&config)?;
            let tok = run.train_bpe()?;
            println!("vocab {} -> {}", tok.vocab_size(), run.vocab_path().display());
        }
        Command::Pretrain { config, resume } => {
            let run = load(&config)?;
            run.pretrain(resume, &mut |s, l| {
                if s % 50 == 0 {
                    eprintln!("step {s} mlm {l:.4}");
                }
            })?;
            println!("base model -> {}", run.base_path().display());
        }
        Command::FinetuneDisc { config, style } => {
            let run = load(&config)?;
            run.finetune_discriminators(style.as_deref(), &mut |m| eprintln!("{m}"))?;
        }
        Command::TrainTransfer { config, resume } => {
            let run = load(&config)?;
            run.train_transfer(resume, &mut |row| {
                if row.step % 50 == 0 {
                    eprintln!("step {} total {:.4} dae {:.4} styles {:?}", row.step, row.total, row.l_dae, row.l_styles);
                }
            })?;
            println!("transfer model -> {}", run.transfer_path().display());
        }
        Command::Transfer { config, input, output } => {
            let n = load(&config)?.transfer_file(&input, &output)?;
            println!("{n} lines -> {}", output.display());
        }
        Command::Evaluate { config, inputs, outputs, refs } => {
            let run = load(&config)?;
            let inputs = formats::read_lines(&inputs)?;
            let outputs = formats::read_lines(&outputs)?;
            let ref_sets = if refs.is_empty() {
                None
            } else {
                let files = refs.iter().map(|p| formats::read_lines(p)).collect::<CliResult<Vec<_>>>()?;
                for (p, f) in refs.iter().zip(&files) {
                    if f.len() != outputs.len() {
                        return Err(CliError::Usage(format!(
                            "{} has {} lines but outputs have {}",
                            p.display(),
                            f.len(),
                            outputs.len()
                        )));
                    }
                }
                Some((0..outputs.len()).map(|i| files.iter().map(|f| f[i].clone()).collect()).collect::<Vec<Vec<_>>>())
            };
            let report = run.evaluate(&inputs, &outputs, ref_sets.as_deref())?;
            print_table(&report);
        }
    }
    Ok(())
}

fn print_table(r: &style_forge_core::eval::EvalReport) {
    let fmt = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.p$}"));
    let mut head = Vec::new();
    let mut row = Vec::new();
    for a in &r.style_accuracy {
        head.push(format!("{}:{}", a.dimension, a.label));
        row.push(format!("{:.2}", a.accuracy));
    }
    head.extend(["joint", "lexical", "self-BLEU", "ref-BLEU", "fluency-ppl"].map(String::from));
    row.extend([
        fmt(r.joint_accuracy, 2),
        fmt(r.lexical_formality, 2),
        format!("{:.4}", r.self_bleu),
        fmt(r.ref_bleu, 4),
        fmt(r.fluency_perplexity, 2),
    ]);
    let widths: Vec<usize> = head.iter().zip(&row).map(|(h, v)| h.len().max(v.len())).collect();
    let line = |cells: &[String]| cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join(" | ");
    println!("{}", line(&head));
    println!("{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    println!("{}", line(&row));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
