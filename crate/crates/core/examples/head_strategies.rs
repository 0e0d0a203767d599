//! Dropping whole heads versus reducing every head's width, on the same
//! teacher and budget.
use wid::corpus::{CorpusSpec, Generator};
use wid::distill::{DistillConfig, Distiller, MaskShape, Strategy};
use wid::merge::build_student;
use wid::model::{init_model, ModelConfig};
use wid::reparam::insert_compactors;
use wid::train::run_distill;

fn main() -> wid::Result<()> {
    let corpus = Generator::new(CorpusSpec::new(64, 500, 16, 3))?.generate()?;
    let cfg = ModelConfig::bert(64, 32, 4, 2)?.with_ffn(64).with_max_seq_len(16);
    let teacher = init_model(&cfg, 3)?;
    for strategy in [Strategy::HeadDrop, Strategy::DimReduce] {
        let mut dc = DistillConfig::new(24);
        dc.attn_target = Some(16);
        dc.ffn_target = Some(48);
        dc.strategy = strategy;
        dc.steps = 200;
        dc.interval = 10;
        let mut d = Distiller::new(insert_compactors(teacher.clone()), dc)?;
        run_distill(&mut d, &corpus.train, 200, |_, _| Ok(()))?;
        println!("{strategy}:");
        for l in 0..cfg.layers {
            let gm = &d.masks.groups[1 + l];
            let (MaskShape::Heads { heads, head_dim } | MaskShape::PerHead { heads, head_dim }) = gm.shape else {
                continue;
            };
            let blocks: Vec<String> = (0..heads)
                .map(|h| {
                    gm.mask[h * head_dim..(h + 1) * head_dim]
                        .iter()
                        .map(|&m| if m { '.' } else { '#' })
                        .collect()
                })
                .collect();
            println!("  layer {l} kept columns per head: {}", blocks.join(" | "));
        }
        let (student, _) = build_student(&d.model, &d.masks)?;
        let s = student.config.layer(0);
        println!("  student layer 0: {} heads x {} dims", s.heads, s.head_dim);
    }
    Ok(())
}
