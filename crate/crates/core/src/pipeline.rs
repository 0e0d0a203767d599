//! End-to-end steps behind the `wid` subcommands.
//!
//! Every step reads its inputs from disk and writes self-contained artifacts:
//! checkpoints carry a `.cfg` sidecar with the model configuration, and runs
//! record their resolved settings next to their outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::{write_spec, Corpus, CorpusSpec, Generator};
use crate::data::{eval_batches, BatchConfig};
use crate::distill::{DistillConfig, Distiller, MaskState};
use crate::error::{Error, Result};
use crate::eval::{attention_divergence, mlm_eval, EvalReport};
use crate::io::write_atomic;
use crate::merge::build_student_with;
use crate::model::{init_model, ModelWeights};
use crate::reparam::insert_compactors;
use crate::runconfig::{distill_config_text, model_config_text, train_config_text, RunConfig};
use crate::train::{
    load_model, load_reparam, load_trainer, restore_masks, run_distill, save_model, save_reparam, save_trainer,
    should_log, Trainer, MODEL_FILE, STATE_FILE,
};

pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const TRAIN_LOG_FILE: &str = "train.log";

/// Sidecar holding the distillation settings of a re-parameterized checkpoint.
pub fn distill_config_path(reparam: &Path) -> PathBuf {
    reparam.with_extension("distill")
}

pub fn gen_corpus(out: &Path, vocab: usize, seqs: usize, len: usize, seed: u64) -> Result<Corpus> {
    let spec = CorpusSpec::new(vocab, seqs, len, seed);
    let corpus = Generator::new(spec.clone())?.generate()?;
    corpus.write(out)?;
    write_spec(out, &spec)?;
    Ok(corpus)
}

/// Trains a teacher into `out`, checkpointing every `save_every` steps.
/// With `resume`, continues from the state already in `out`.
pub fn train_teacher(config: &Path, corpus: &Path, out: &Path, resume: bool, save_every: u64) -> Result<Trainer> {
    let rc = RunConfig::load(config)?;
    let (mcfg, tcfg) = both(rc.model_config(), rc.train_config())?;
    let corpus = Corpus::read(corpus, mcfg.vocab_size)?;
    fs::create_dir_all(out)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let (mut trainer, mut log) = if resume {
        if !out.join(STATE_FILE).exists() {
            return Err(Error::State(format!("nothing to resume in {}", out.display())));
        }
        let t = load_trainer(out, tcfg.clone())?;
        if t.weights.config != mcfg {
            return Err(Error::Config("checkpoint model differs from the config".into()));
        }
        // Drop log lines written after the last checkpoint.
        let old = fs::read_to_string(&log_path).unwrap_or_default();
        let kept: String = old
            .lines()
            .filter(|l| l.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < t.step_index()))
            .map(|l| format!("{l}\n"))
            .collect();
        (t, kept)
    } else {
        (Trainer::new(init_model(&mcfg, tcfg.seed)?, tcfg.clone()), String::new())
    };
    let resolved = format!("{}{}", model_config_text(&mcfg), train_config_text(&tcfg));
    write_atomic(&out.join(RUN_CONFIG_FILE), resolved.as_bytes())?;

    let last = tcfg.steps;
    let every = save_every.max(1);
    while trainer.step_index() < last {
        let until = ((trainer.step_index() / every) + 1) * every;
        trainer.run_until(&corpus.train, until, None, |step, loss| {
            if step % tcfg.log_interval.max(1) == 0 || step + 1 == last {
                let _ = writeln!(log, "{step}\t{loss:.6}");
            }
            Ok(())
        })?;
        save_trainer(out, &trainer)?;
        write_atomic(&log_path, log.as_bytes())?;
    }
    if last == 0 {
        save_trainer(out, &trainer)?;
        write_atomic(&log_path, log.as_bytes())?;
    }
    Ok(trainer)
}

fn both<A, B>(a: Result<A>, b: Result<B>) -> Result<(A, B)> {
    match (a, b) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        (Err(Error::Config(x)), Err(Error::Config(y))) => Err(Error::Config(format!("{x}; {y}"))),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Distills `teacher` to completion and writes the re-parameterized
/// checkpoint and the training log.
pub fn distill(teacher: &Path, config: &Path, corpus: &Path, out_reparam: &Path, log_path: &Path) -> Result<Distiller> {
    let teacher = load_model(teacher)?;
    let dc = RunConfig::load(config)?.distill_config(&teacher.config)?;
    let corpus = Corpus::read(corpus, teacher.config.vocab_size)?;
    if corpus.seq_len > teacher.config.max_seq_len {
        return Err(Error::Config(format!(
            "corpus sequences of length {} exceed the teacher's max_seq_len {}",
            corpus.seq_len, teacher.config.max_seq_len
        )));
    }
    let mut d = Distiller::new(insert_compactors(teacher), dc.clone())?;
    let mut log = String::new();
    let last = dc.steps;
    run_distill(&mut d, &corpus.train, last, |_, rec| {
        if should_log(rec, dc.log_interval, last) {
            log.push_str(&rec.log_lines());
        }
        Ok(())
    })?;
    if let Some(dir) = out_reparam.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_reparam(out_reparam, &d.model, &d.masks)?;
    write_atomic(&distill_config_path(out_reparam), distill_config_text(&dc).as_bytes())?;
    write_atomic(log_path, log.as_bytes())?;
    Ok(d)
}

/// Compresses and merges a finished re-parameterized checkpoint.
pub fn merge(reparam: &Path, out_student: &Path, report: &Path) -> Result<ModelWeights> {
    let (model, stored) = load_reparam(reparam)?;
    let dc: DistillConfig = RunConfig::load(&distill_config_path(reparam))?.distill_config(&model.teacher.config)?;
    let mut masks = MaskState::new(&model, &dc)?;
    restore_masks(&mut masks, &stored)?;
    let (student, rep) = build_student_with(&model, &masks, dc.ln_merge)?;
    if let Some(dir) = out_student.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_model(out_student, &student)?;
    write_atomic(report, rep.to_text().as_bytes())?;
    Ok(student)
}

/// Scores a model on the heldout split; with a teacher, adds per-head
/// attention divergence. Writes the text report and a CSV beside it.
pub fn eval(model: &Path, corpus: &Path, teacher: Option<&Path>, config: Option<&Path>, report: &Path) -> Result<EvalReport> {
    let rc = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let (batch_size, seed, matching) = (rc.eval_batch_size()?, rc.eval_seed()?, rc.head_matching()?);
    let w = load_model(model)?;
    let corpus = Corpus::read(corpus, w.config.vocab_size)?;
    let score = mlm_eval(&w, &corpus.heldout, batch_size, seed)?;
    let (divergence, matching) = match teacher {
        Some(t) => {
            let t = load_model(t)?;
            let matching = matching.unwrap_or(if t.config.heads == w.config.heads {
                crate::eval::Matching::Index
            } else {
                crate::eval::Matching::Assignment
            });
            let bcfg = BatchConfig {
                batch_size,
                mode: w.config.mode,
                vocab_size: w.config.vocab_size,
                seed,
            };
            let batches = eval_batches(&corpus.heldout, &bcfg)?;
            (Some(attention_divergence(&w, &t, &batches, matching)?), matching)
        }
        None => (None, matching.unwrap_or_default()),
    };
    let rep = EvalReport {
        model: model.display().to_string(),
        config_text: format!("{}{}", model_config_text(&w.config), rc.to_text()),
        seed,
        score,
        divergence,
        matching,
        mean_residual: None,
    };
    write_atomic(report, rep.to_text().as_bytes())?;
    write_atomic(&report.with_extension("csv"), rep.to_csv().as_bytes())?;
    Ok(rep)
}

/// Converts a distillation log into CSV, one row per log line.
pub fn report(log: &Path, out: &Path) -> Result<usize> {
    let text = fs::read_to_string(log)?;
    let csv = log_to_csv(&text)?;
    write_atomic(out, csv.as_bytes())?;
    Ok(csv.lines().count() - 1)
}

pub fn log_to_csv(text: &str) -> Result<String> {
    let mut csv = String::from("step,loss,group,k,dropped_norm\n");
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let ok = f.len() == 5
            && f[0].parse::<u64>().is_ok()
            && f[1].parse::<f64>().is_ok()
            && f[2].parse::<usize>().is_ok()
            && f[3].parse::<usize>().is_ok()
            && f[4].parse::<f64>().is_ok();
        if !ok {
            return Err(Error::Format(format!("log line {}: `{line}`", i + 1)));
        }
        csv.push_str(&f.join(","));
        csv.push('\n');
    }
    Ok(csv)
}

/// Path of the weights inside a teacher directory.
pub fn model_in(dir: &Path) -> PathBuf {
    dir.join(MODEL_FILE)
}
