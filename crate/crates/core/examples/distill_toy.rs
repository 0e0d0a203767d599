//! The whole pipeline on a toy model: pretrain, insert compactors, distill
//! with the progressive mask schedule, merge into a student and evaluate.
use wid::corpus::{CorpusSpec, Generator};
use wid::distill::{DistillConfig, Distiller, Strategy};
use wid::eval::mlm_eval;
use wid::merge::build_student;
use wid::model::{init_model, param_count, ModelConfig};
use wid::reparam::insert_compactors;
use wid::train::{run_distill, train_scratch_baseline, TrainConfig, Trainer};

fn main() -> wid::Result<()> {
    let vocab = 128;
    let corpus = Generator::new(CorpusSpec::new(vocab, 2000, 16, 2))?.generate()?;
    let cfg = ModelConfig::bert(vocab, 32, 4, 2)?.with_ffn(128).with_max_seq_len(16);
    let budget = |steps| TrainConfig {
        steps,
        batch_size: 16,
        seed: 2,
        lr: 2e-3,
        warmup_steps: 50,
        ..Default::default()
    };
    let mut t = Trainer::new(init_model(&cfg, 2)?, budget(600));
    t.run(&corpus.train, None, |_, _| Ok(()))?;
    let teacher = t.weights;

    let mut dc = DistillConfig::new(16);
    dc.attn_target = Some(16);
    dc.ffn_target = Some(64);
    dc.strategy = Strategy::DimReduce;
    dc.steps = 800;
    dc.batch_size = 16;
    dc.interval = 10;
    dc.seed = 2;
    dc.lr.compactor = 3e-3;
    dc.lr.base = 1e-3;
    let mut d = Distiller::new(insert_compactors(teacher.clone()), dc)?;
    for g in &d.masks.groups {
        println!("group {:>2}: drop {:>3} of {:>3} in steps of {}", g.group_id, g.drop_target, g.size(), g.d_inc);
    }
    run_distill(&mut d, &corpus.train, 800, |_, r| {
        if r.grew || r.step % 100 == 0 {
            let blue = &r.groups[0];
            println!("step {:>3} loss {:.4} blue k={:<2} dropped norm {:.4}", r.step, r.loss, blue.k, blue.dropped_norm);
        }
        Ok(())
    })?;

    let (student, report) = build_student(&d.model, &d.masks)?;
    println!("mean compression residual {:.3e}", report.mean_residual());
    let scratch = train_scratch_baseline(&student.config, &corpus.train, &budget(800))?;
    let ev = |w| mlm_eval(w, &corpus.heldout, 32, 5);
    println!("teacher  {:>6} params  heldout {:.4}", param_count(&cfg), ev(&teacher)?.loss);
    println!("student  {:>6} params  heldout {:.4}", param_count(&student.config), ev(&student)?.loss);
    println!("scratch  {:>6} params  heldout {:.4}", param_count(&scratch.config), ev(&scratch)?.loss);
    Ok(())
}
