//! Wrapping a teacher in identity compactors leaves its function unchanged;
//! the effective weights are `rc·W·cc`.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wid::model::{forward, init_model, Batch, ModelConfig};
use wid::reparam::insert_compactors;

fn main() -> wid::Result<()> {
    let cfg = ModelConfig::bert(256, 32, 4, 2)?.with_ffn(128).with_max_seq_len(16);
    let teacher = init_model(&cfg, 3)?;
    let mut model = insert_compactors(teacher.clone());
    println!("{} compactors in {} groups", model.compactors().len(), model.groups().len());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 4 * 16;
    let batch = Batch {
        batch_size: 4,
        seq_len: 16,
        input_ids: (0..n).map(|_| rng.random_range(0..256)).collect(),
        segment_ids: vec![0; n],
        targets: (0..n).map(|_| rng.random_range(0..256)).collect(),
        loss_mask: vec![true; n],
    };
    let a = forward(&teacher, &batch)?.logits;
    let b = model.forward(&batch)?.logits;
    println!("identity compactors: max |logit diff| = {:e}", a.max_abs_diff(&b)?);

    // Any compactor change moves the function through W_eff.
    let leader = model.groups()[0].leader;
    for v in model.weight_mut(leader).data_mut() {
        *v *= 1.05;
    }
    model.broadcast()?;
    let c = model.forward(&batch)?.logits;
    let eff = model.effective_weights()?;
    let d = forward(&eff, &batch)?.logits;
    println!("scaled blue leader:  max |logit diff| vs teacher = {:.3e}", a.max_abs_diff(&c)?);
    println!("effective weights reproduce it: max diff = {:e}", c.max_abs_diff(&d)?);
    Ok(())
}
