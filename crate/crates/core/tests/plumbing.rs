use std::fs;
use std::path::Path;
use std::process::Command;

use wid::corpus::{CorpusSpec, Generator};
use wid::distill::{DistillConfig, Distiller};
use wid::io::{read_checkpoint, write_checkpoint};
use wid::model::{init_model, ModelConfig, ModelWeights};
use wid::pipeline;
use wid::reparam::insert_compactors;
use wid::train::{
    load_distiller, load_model, load_reparam, load_trainer, run_distill, save_distiller, save_model, save_reparam,
    save_trainer, TrainConfig, Trainer,
};
use wid::Error;

fn tiny() -> ModelConfig {
    ModelConfig::bert(48, 16, 2, 2).unwrap().with_ffn(32).with_max_seq_len(12)
}

fn seqs(seed: u64) -> Vec<Vec<u32>> {
    Generator::new(CorpusSpec::new(48, 64, 12, seed)).unwrap().generate().unwrap().train
}

fn bits(w: &ModelWeights) -> Vec<(String, Vec<u32>)> {
    w.named()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn distill_config() -> DistillConfig {
    let mut dc = DistillConfig::new(8);
    dc.attn_target = Some(8);
    dc.ffn_target = Some(16);
    dc.steps = 40;
    dc.interval = 3;
    dc.batch_size = 4;
    dc.seed = 5;
    dc
}

#[test]
fn model_checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let w = init_model(&tiny(), 3).unwrap();
    let p = dir.path().join("m.ckpt");
    save_model(&p, &w).unwrap();
    let back = load_model(&p).unwrap();
    assert_eq!(back.config, w.config);
    assert_eq!(bits(&back), bits(&w));

    let q = dir.path().join("raw.ckpt");
    let named = w.clone().into_named();
    write_checkpoint(&q, &named).unwrap();
    assert_eq!(read_checkpoint(&q).unwrap(), named);
}

#[test]
fn reparam_checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = Distiller::new(insert_compactors(init_model(&tiny(), 4).unwrap()), distill_config()).unwrap();
    run_distill(&mut d, &seqs(1), 10, |_, _| Ok(())).unwrap();
    let p = dir.path().join("r.ckpt");
    save_reparam(&p, &d.model, &d.masks).unwrap();
    let (model, masks) = load_reparam(&p).unwrap();
    assert_eq!(bits(&model.teacher), bits(&d.model.teacher));
    for (a, b) in model.compactors().iter().zip(d.model.compactors()) {
        assert_eq!(a.slot, b.slot);
        assert_eq!(a.weight, b.weight);
    }
    for g in &d.masks.groups {
        assert_eq!(masks[&g.group_id], g.mask);
    }
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_model(&p, &init_model(&tiny(), 3).unwrap()).unwrap();
    let good = fs::read(&p).unwrap();
    let n = good.len();
    for (at, flip) in [(0, b'X'), (8, 7)] {
        let mut bytes = good.clone();
        bytes[at] = flip;
        fs::write(&p, &bytes).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
    fs::write(&p, &good[..n / 2]).unwrap();
    assert!(matches!(load_model(&p).unwrap_err(), Error::Format(_)));
}

#[test]
fn trainer_resume_is_bit_exact() {
    let data = seqs(2);
    let cfg = TrainConfig {
        steps: 16,
        batch_size: 4,
        seed: 9,
        lr: 3e-3,
        warmup_steps: 4,
        ..Default::default()
    };
    let w0 = init_model(&tiny(), 6).unwrap();
    let mut straight = Trainer::new(w0.clone(), cfg.clone());
    straight.run(&data, None, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(w0, cfg.clone());
    first.run_until(&data, 7, None, |_, _| Ok(())).unwrap();
    save_trainer(dir.path(), &first).unwrap();
    let mut resumed = load_trainer(dir.path(), cfg).unwrap();
    assert_eq!(resumed.step_index(), 7);
    resumed.run(&data, None, |_, _| Ok(())).unwrap();
    assert_eq!(bits(&resumed.weights), bits(&straight.weights));
}

#[test]
fn distiller_resume_is_bit_exact() {
    let data = seqs(3);
    let teacher = init_model(&tiny(), 7).unwrap();
    let mut straight = Distiller::new(insert_compactors(teacher.clone()), distill_config()).unwrap();
    let mut log_a = String::new();
    run_distill(&mut straight, &data, u64::MAX, |_, r| {
        log_a.push_str(&r.log_lines());
        Ok(())
    })
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Distiller::new(insert_compactors(teacher), distill_config()).unwrap();
    let mut log_b = String::new();
    // Stop between two growth events so the mask state must be restored.
    run_distill(&mut first, &data, 17, |_, r| {
        log_b.push_str(&r.log_lines());
        Ok(())
    })
    .unwrap();
    save_distiller(dir.path(), &first).unwrap();
    let mut resumed = load_distiller(dir.path(), distill_config()).unwrap();
    run_distill(&mut resumed, &data, u64::MAX, |_, r| {
        log_b.push_str(&r.log_lines());
        Ok(())
    })
    .unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(bits(&resumed.model.teacher), bits(&straight.model.teacher));
    for (a, b) in resumed.model.compactors().iter().zip(straight.model.compactors()) {
        assert_eq!(a.weight, b.weight);
    }
    for (a, b) in resumed.masks.groups.iter().zip(&straight.masks.groups) {
        assert_eq!(a.mask, b.mask);
    }
}

const MODEL_CFG: &str = "vocab_size = 48\nhidden = 16\nheads = 2\nlayers = 2\nffn = 32\nmax_seq_len = 12\n";

fn run_pipeline(root: &Path) {
    let corpus = root.join("corpus");
    pipeline::gen_corpus(&corpus, 48, 80, 12, 11).unwrap();
    let tcfg = root.join("teacher.cfg");
    fs::write(&tcfg, format!("{MODEL_CFG}steps = 12\nbatch_size = 4\nseed = 2\nlr = 0.003\n")).unwrap();
    pipeline::train_teacher(&tcfg, &corpus, &root.join("teacher"), false, 5).unwrap();
    let dcfg = root.join("distill.cfg");
    fs::write(&dcfg, "hidden_target = 8\nattn_target = 8\nffn_target = 16\nsteps = 40\ninterval = 2\nbatch_size = 4\nseed = 3\n").unwrap();
    let reparam = root.join("out/reparam.ckpt");
    let log = root.join("out/distill.log");
    pipeline::distill(&pipeline::model_in(&root.join("teacher")), &dcfg, &corpus, &reparam, &log).unwrap();
    let student = root.join("out/student.ckpt");
    pipeline::merge(&reparam, &student, &root.join("out/merge.txt")).unwrap();
    pipeline::eval(&student, &corpus, Some(&pipeline::model_in(&root.join("teacher"))), None, &root.join("out/eval.txt")).unwrap();
    pipeline::report(&log, &root.join("out/distill.csv")).unwrap();
}

fn read_all(root: &Path, files: &[&str]) -> Vec<Vec<u8>> {
    files.iter().map(|f| fs::read(root.join(f)).unwrap()).collect()
}

#[test]
fn fixed_seed_pipeline_reruns_are_bit_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(a.path());
    run_pipeline(b.path());
    let files = [
        "corpus/train.txt",
        "corpus/heldout.txt",
        "teacher/model.ckpt",
        "teacher/optim.ckpt",
        "teacher/train.log",
        "out/reparam.ckpt",
        "out/distill.log",
        "out/student.ckpt",
        "out/merge.txt",
        "out/distill.csv",
    ];
    assert_eq!(read_all(a.path(), &files), read_all(b.path(), &files));
    let student = load_model(&a.path().join("out/student.ckpt")).unwrap();
    assert_eq!(student.config.hidden, 8);
    let csv = fs::read_to_string(a.path().join("out/distill.csv")).unwrap();
    assert!(csv.starts_with("step,loss,group,k,dropped_norm\n"));
}

#[test]
fn teacher_resume_matches_an_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for root in [a.path(), b.path()] {
        pipeline::gen_corpus(&root.join("corpus"), 48, 80, 12, 11).unwrap();
    }
    let cfg = |root: &Path, steps: u64| {
        let p = root.join("t.cfg");
        fs::write(&p, format!("{MODEL_CFG}steps = {steps}\nbatch_size = 4\nseed = 2\nlog_interval = 1\n")).unwrap();
        p
    };
    let ca = cfg(a.path(), 14);
    pipeline::train_teacher(&ca, &a.path().join("corpus"), &a.path().join("t"), false, 4).unwrap();

    let cb = cfg(b.path(), 6);
    pipeline::train_teacher(&cb, &b.path().join("corpus"), &b.path().join("t"), false, 4).unwrap();
    let cb = cfg(b.path(), 14);
    pipeline::train_teacher(&cb, &b.path().join("corpus"), &b.path().join("t"), true, 4).unwrap();

    let files = ["t/model.ckpt", "t/optim.ckpt", "t/train.log"];
    assert_eq!(read_all(a.path(), &files), read_all(b.path(), &files));
}

fn wid(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_wid")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let corpus = s(&root.join("corpus"));
    assert_eq!(wid(&["gen-corpus", "--out", &corpus, "--vocab", "48", "--seqs", "40", "--len", "12"]).0, 0);

    let bad = root.join("bad.cfg");
    fs::write(&bad, "vocab_size = 48\nhiden = 16\nheads = 0\n").unwrap();
    let (code, err) = wid(&["train-teacher", "--config", &s(&bad), "--corpus", &corpus, "--out", &s(&root.join("t"))]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("hiden"), "{err}");

    let missing = s(&root.join("nope.ckpt"));
    let (code, _) = wid(&["eval", "--model", &missing, "--corpus", &corpus, "--report", &s(&root.join("r.txt"))]);
    assert_eq!(code, 2);

    let good = root.join("good.cfg");
    fs::write(&good, format!("{MODEL_CFG}steps = 3\nbatch_size = 2\n")).unwrap();
    let t = s(&root.join("t"));
    assert_eq!(wid(&["train-teacher", "--config", &s(&good), "--corpus", &corpus, "--out", &t]).0, 0);
    let (code, _) = wid(&["eval", "--model", &t, "--corpus", &corpus, "--report", &s(&root.join("r.txt"))]);
    assert_eq!(code, 0);
    assert!(root.join("r.csv").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_wid"))
        .args(["report", "--log", &missing, "--out", &s(&root.join("x.csv"))])
        .env("WID_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn growth_events_match_the_schedule_and_report_rows_match_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    pipeline::gen_corpus(&corpus, 48, 80, 12, 11).unwrap();
    let teacher = root.join("teacher.ckpt");
    save_model(&teacher, &init_model(&tiny(), 1).unwrap()).unwrap();
    let dcfg = root.join("distill.cfg");
    fs::write(&dcfg, "hidden_target = 10\nattn_target = 8\nffn_target = 20\nsteps = 50\ninterval = 2\nlog_interval = 1000\n").unwrap();
    let log = root.join("distill.log");
    let d = pipeline::distill(&teacher, &dcfg, &corpus, &root.join("r.ckpt"), &log).unwrap();

    let text = fs::read_to_string(&log).unwrap();
    for gm in &d.masks.groups {
        let mut ks: Vec<usize> = text
            .lines()
            .map(|l| l.split('\t').collect::<Vec<_>>())
            .filter(|f| f[2].parse::<usize>().unwrap() == gm.group_id)
            .map(|f| f[3].parse().unwrap())
            .collect();
        ks.dedup();
        let events = ks.iter().filter(|&&k| k > 0).count();
        assert_eq!(events, gm.drop_target.div_ceil(gm.d_inc), "group {}", gm.group_id);
    }
    let rows = pipeline::report(&log, &root.join("log.csv")).unwrap();
    assert_eq!(rows, text.lines().count());
    fs::write(&log, "0\t1.0\t0\tx\t0.5\n").unwrap();
    assert!(matches!(pipeline::report(&log, &root.join("log.csv")), Err(Error::Format(_))));
}

#[test]
fn full_size_targets_leave_identity_compactors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    pipeline::gen_corpus(&corpus, 48, 80, 12, 11).unwrap();
    let teacher = root.join("teacher.ckpt");
    save_model(&teacher, &init_model(&tiny(), 1).unwrap()).unwrap();
    let dcfg = root.join("distill.cfg");
    fs::write(&dcfg, "hidden_target = 16\nattn_target = 16\nffn_target = 32\nsteps = 20\n").unwrap();
    let d = pipeline::distill(&teacher, &dcfg, &corpus, &root.join("r.ckpt"), &root.join("d.log")).unwrap();
    assert!(d.masks.groups.iter().all(|g| g.k() == 0));
    for c in d.model.compactors() {
        let diff = c.weight.max_abs_diff(&wid::Tensor::identity(c.weight.rows())).unwrap();
        assert!(diff < 0.05, "{}: {diff}", c.slot);
    }
    let student = pipeline::merge(&root.join("r.ckpt"), &root.join("s.ckpt"), &root.join("m.txt")).unwrap();
    assert_eq!(student.config.hidden, 16);
}

#[test]
fn eval_without_teacher_omits_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    pipeline::gen_corpus(&corpus, 48, 80, 12, 11).unwrap();
    let model = root.join("m.ckpt");
    save_model(&model, &init_model(&tiny(), 1).unwrap()).unwrap();
    let rep = pipeline::eval(&model, &corpus, None, None, &root.join("e.txt")).unwrap();
    assert!(rep.divergence.is_none());
    let text = fs::read_to_string(root.join("e.txt")).unwrap();
    assert!(text.contains("heldout_loss:") && !text.contains("attention_js"));
    let rep = pipeline::eval(&model, &corpus, Some(&model), None, &root.join("e2.txt")).unwrap();
    assert!(rep.divergence.unwrap().mean().abs() < 1e-9);
}
