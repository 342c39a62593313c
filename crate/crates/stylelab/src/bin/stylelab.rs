//! Batch pipeline driver. Exit codes: 0 success, 2 usage, 3 missing
//! prerequisite artifact, 4 numeric failure, 5 I/O.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use stylelab::harness::{
    cmd_eval, cmd_finetune, cmd_gen_corpus, cmd_pretrain, cmd_probe, cmd_sample, exit_code,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "stylelab", about = "Desk-scale diffusion stylization pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural shape corpus and its manifest.
    GenCorpus,
    /// Pretrain the base model on the corpus.
    Pretrain {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Record contribution traces and compute hierarchical scales.
    Probe {
        /// Reference images, comma-separated or repeated.
        #[arg(long, value_delimiter = ',', required = true)]
        refs: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample one image (text-only, zero-shot with refs, or from a
    /// style checkpoint).
    Sample {
        /// Prompt subject.
        #[arg(default_value = "circle")]
        subject: String,
        /// Style checkpoint produced by `finetune`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        refs: Vec<PathBuf>,
        /// Scale multiplier applied on top of the per-layer scales.
        #[arg(long, default_value_t = 1.0)]
        multiplier: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Output PPM path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe, then fine-tune a LoRA adapter into a style checkpoint.
    Finetune {
        #[arg(long, value_delimiter = ',', required = true)]
        refs: Vec<PathBuf>,
        /// Total optimizer steps (default: steps-per-image × N refs).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiplier sweep of a style checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    };
    let result = match cli.command {
        Command::GenCorpus => cmd_gen_corpus(&cfg),
        Command::Pretrain { seed } => cmd_pretrain(&cfg, seed),
        Command::Probe { refs, seed, out } => cmd_probe(&cfg, &refs, out, seed),
        Command::Sample {
            subject,
            checkpoint,
            refs,
            multiplier,
            seed,
            out,
        } => cmd_sample(&cfg, &subject, checkpoint, &refs, multiplier, seed, out),
        Command::Finetune {
            refs,
            steps,
            seed,
            out,
        } => cmd_finetune(&cfg, &refs, steps, seed, out),
        Command::Eval {
            checkpoint,
            seed,
            out,
        } => cmd_eval(&cfg, &checkpoint, out, seed),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
