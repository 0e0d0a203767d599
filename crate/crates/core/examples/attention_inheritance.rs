//! Attention maps of a distilled student stay close to the teacher's; a
//! student of the same shape trained from scratch does not.
use wid::corpus::{CorpusSpec, Generator};
use wid::data::{eval_batches, BatchConfig};
use wid::distill::{DistillConfig, Distiller};
use wid::eval::{attention_divergence, Matching};
use wid::merge::build_student;
use wid::model::{init_model, ModelConfig};
use wid::reparam::insert_compactors;
use wid::train::{run_distill, train_scratch_baseline, TrainConfig, Trainer};

fn main() -> wid::Result<()> {
    let vocab = 128;
    let corpus = Generator::new(CorpusSpec::new(vocab, 2000, 16, 4))?.generate()?;
    let cfg = ModelConfig::bert(vocab, 32, 4, 2)?.with_ffn(128).with_max_seq_len(16);
    let budget = |steps| TrainConfig {
        steps,
        batch_size: 16,
        seed: 4,
        lr: 2e-3,
        warmup_steps: 50,
        ..Default::default()
    };
    let mut t = Trainer::new(init_model(&cfg, 4)?, budget(600));
    t.run(&corpus.train, None, |_, _| Ok(()))?;
    let teacher = t.weights;

    let mut dc = DistillConfig::new(16);
    dc.attn_target = Some(16);
    dc.steps = 600;
    dc.batch_size = 16;
    dc.interval = 10;
    dc.lr.compactor = 3e-3;
    dc.lr.base = 1e-3;
    let mut d = Distiller::new(insert_compactors(teacher.clone()), dc)?;
    run_distill(&mut d, &corpus.train, 300, |_, _| Ok(()))?;
    let (student, _) = build_student(&d.model, &d.masks)?;
    let scratch = train_scratch_baseline(&student.config, &corpus.train, &budget(600))?;

    let bcfg = BatchConfig {
        batch_size: 32,
        mode: cfg.mode,
        vocab_size: vocab,
        seed: 1,
    };
    let batches = eval_batches(&corpus.heldout, &bcfg)?;
    for (name, w) in [("distilled", &student), ("scratch", &scratch)] {
        let m = attention_divergence(w, &teacher, &batches, Matching::Index)?;
        println!("{name:<9} mean JS to teacher {:.4}", m.mean());
        for (l, row) in m.values.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            println!("    layer {l}: {}", cells.join(" "));
        }
    }
    Ok(())
}
