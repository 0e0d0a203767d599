use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wid::{pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "wid", version, about = "Weight-inherited distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (train.txt, heldout.txt, corpus.cfg).
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        seqs: usize,
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a teacher from scratch into a directory.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 500)]
        save_every: u64,
    },
    /// Run compactor distillation to completion.
    Distill {
        /// Teacher checkpoint file or directory.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_reparam: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Compress compactors and merge them into a student checkpoint.
    Merge {
        #[arg(long)]
        reparam: PathBuf,
        #[arg(long)]
        out_student: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score a model on the heldout split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Convert a distillation log to CSV.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn checkpoint(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        pipeline::model_in(&p)
    } else {
        p
    }
}

/// All computation runs on one thread, which satisfies any cap.
fn check_threads() -> Result<()> {
    match std::env::var("WID_THREADS") {
        Ok(v) if v.trim().parse::<usize>().map_or(true, |n| n == 0) => {
            Err(Error::Config(format!("WID_THREADS must be a positive integer (got `{v}`)")))
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    check_threads()?;
    match cli.cmd {
        Cmd::GenCorpus { out, vocab, seqs, len, seed } => {
            let c = pipeline::gen_corpus(&out, vocab, seqs, len, seed)?;
            println!("{} train, {} heldout sequences in {}", c.train.len(), c.heldout.len(), out.display());
        }
        Cmd::TrainTeacher { config, corpus, out, resume, save_every } => {
            let t = pipeline::train_teacher(&config, &corpus, &out, resume, save_every)?;
            println!("trained {} steps into {}", t.step_index(), out.display());
        }
        Cmd::Distill { teacher, config, corpus, out_reparam, log } => {
            let d = pipeline::distill(&checkpoint(teacher), &config, &corpus, &out_reparam, &log)?;
            println!("distilled {} steps into {}", d.step_index(), out_reparam.display());
        }
        Cmd::Merge { reparam, out_student, report } => {
            let s = pipeline::merge(&reparam, &out_student, &report)?;
            let c = &s.config;
            println!("student hidden {} heads {} layers {} -> {}", c.hidden, c.heads, c.layers, out_student.display());
        }
        Cmd::Eval { model, corpus, teacher, config, report } => {
            let teacher = teacher.map(checkpoint);
            let r = pipeline::eval(&checkpoint(model), &corpus, teacher.as_deref(), config.as_deref(), &report)?;
            println!("heldout loss {:.4} accuracy {:.4}", r.score.loss, r.score.accuracy);
        }
        Cmd::Report { log, out } => {
            let n = pipeline::report(&log, &out)?;
            println!("{n} rows -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
