//! Lists the compactor groups of a two-layer model and checks that
//! broadcasting a perturbed leader keeps every member aligned.
use wid::alignment::{check_alignment, Relation};
use wid::model::{init_model, ModelConfig};
use wid::reparam::insert_compactors;

fn main() -> wid::Result<()> {
    let cfg = ModelConfig::bert(64, 16, 4, 2)?.with_ffn(32).with_max_seq_len(8);
    let mut model = insert_compactors(init_model(&cfg, 1)?);
    for g in model.groups() {
        let size = g.leader.family().size(&cfg);
        println!("group {} {:<9} size {size:<3} leader {}", g.id, g.color.to_string(), g.leader);
        for (slot, rel) in g.members.iter().skip(1) {
            let tag = match rel {
                Relation::Duplicate => "dup ",
                Relation::Flip => "flip",
            };
            println!("    {tag} {slot}");
        }
    }

    let leaders: Vec<_> = model.groups().iter().map(|g| g.leader).collect();
    for (i, slot) in leaders.into_iter().enumerate() {
        for (j, v) in model.weight_mut(slot).data_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i * 31 + j) as f32).sin();
        }
    }
    model.broadcast()?;
    check_alignment(&model)?;
    println!("{} compactors aligned after broadcast", model.compactors().len());
    Ok(())
}
