//! Central finite differences against the analytic gradients of a tiny model
//! and of the column-norm penalty.
use wid::gradcheck::finite_difference_check;
use wid::model::{batch_loss, init_model, loss_and_grads, Batch, ModelConfig};
use wid::reparam::{penalty_gradient, Orientation};
use wid::Tensor;

fn main() -> wid::Result<()> {
    let cfg = ModelConfig::bert(11, 8, 2, 1)?.with_ffn(12).with_max_seq_len(6);
    let mut w = init_model(&cfg, 7)?;
    for (_, t) in w.named_mut() {
        for v in t.data_mut() {
            *v *= 3.0;
        }
    }
    let batch = Batch {
        batch_size: 1,
        seq_len: 5,
        input_ids: vec![2, 5, 1, 7, 3],
        segment_ids: vec![0, 0, 0, 1, 1],
        targets: vec![2, 5, 6, 7, 3],
        loss_mask: vec![false, true, true, false, true],
    };
    let grads = loss_and_grads(&w, &batch)?.grads;
    for (name, g) in grads.named() {
        let x = w.named().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone()).unwrap();
        let err = finite_difference_check(
            |probe| {
                let mut m = w.clone();
                for (n, t) in m.named_mut() {
                    if n == name {
                        *t = probe.clone();
                    }
                }
                batch_loss(&m, &batch)
            },
            &x,
            g,
            1e-2,
        )?;
        println!("{name:<28} rel err {err:.2e}");
    }

    let c = Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[1.5, 0.25, -0.75]])?;
    let g = penalty_gradient(&c, Orientation::Column, 2.0)?;
    let err = finite_difference_check(|t| Ok(t.column_norms(2.0)?.iter().sum()), &c, &g, 1e-2)?;
    println!("{:<28} rel err {err:.2e}", "column 2-norm penalty");
    Ok(())
}
