//! Causal language modeling: compactor distillation against a same-shape
//! student trained with logit distillation, at equal step budgets.
use wid::corpus::{CorpusSpec, Generator};
use wid::data::{eval_batches, BatchConfig};
use wid::distill::{DistillConfig, Distiller};
use wid::eval::score_batches;
use wid::merge::build_student;
use wid::model::{init_model, Mode, ModelConfig};
use wid::reparam::insert_compactors;
use wid::train::{run_distill, train_kd_baseline, TrainConfig, Trainer};

fn main() -> wid::Result<()> {
    let vocab = 128;
    let corpus = Generator::new(CorpusSpec::new(vocab, 2000, 16, 5))?.generate()?;
    let cfg = ModelConfig::bert(vocab, 32, 4, 2)?
        .with_ffn(128)
        .with_max_seq_len(16)
        .with_mode(Mode::DecoderCausal);
    let budget = |steps| TrainConfig {
        steps,
        batch_size: 16,
        seed: 5,
        lr: 2e-3,
        warmup_steps: 50,
        ..Default::default()
    };
    let mut t = Trainer::new(init_model(&cfg, 5)?, budget(600));
    t.run(&corpus.train, None, |_, _| Ok(()))?;
    let teacher = t.weights;

    let steps = 600;
    let mut dc = DistillConfig::new(16);
    dc.attn_target = Some(16);
    dc.steps = steps;
    dc.batch_size = 16;
    dc.interval = 10;
    dc.lr.compactor = 3e-3;
    dc.lr.base = 1e-3;
    let mut d = Distiller::new(insert_compactors(teacher.clone()), dc)?;
    let mut wid_loss = 0.0;
    run_distill(&mut d, &corpus.train, steps, |_, r| {
        wid_loss = r.loss;
        Ok(())
    })?;
    let (student, _) = build_student(&d.model, &d.masks)?;
    let kd = train_kd_baseline(&student.config, &teacher, &corpus.train, &budget(steps), 1.0)?;

    let bcfg = BatchConfig {
        batch_size: 32,
        mode: Mode::DecoderCausal,
        vocab_size: vocab,
        seed: 1,
    };
    let batches = eval_batches(&corpus.heldout, &bcfg)?;
    println!("final distillation loss {wid_loss:.4}");
    for (name, w) in [("teacher", &teacher), ("compactor student", &student), ("logit-KD student", &kd)] {
        let s = score_batches(w, &batches)?;
        println!("{name:<18} heldout next-token loss {:.4}", s.loss);
    }
    Ok(())
}
