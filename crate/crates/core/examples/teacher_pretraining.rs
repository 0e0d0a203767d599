//! Generates a synthetic corpus, pretrains a small MLM teacher on it and
//! compares heldout loss with the uniform-guess baseline.
use wid::corpus::{CorpusSpec, Generator};
use wid::eval::mlm_eval;
use wid::model::{init_model, ModelConfig};
use wid::train::{TrainConfig, Trainer};

fn main() -> wid::Result<()> {
    let vocab = 128;
    let corpus = Generator::new(CorpusSpec::new(vocab, 2000, 16, 1))?.generate()?;
    println!("{} train / {} heldout sequences", corpus.train.len(), corpus.heldout.len());
    let cfg = ModelConfig::bert(vocab, 32, 4, 2)?.with_ffn(128).with_max_seq_len(16);
    let budget = TrainConfig {
        steps: 600,
        batch_size: 16,
        seed: 1,
        lr: 2e-3,
        warmup_steps: 50,
        ..Default::default()
    };
    let mut t = Trainer::new(init_model(&cfg, 1)?, budget);
    let before = mlm_eval(&t.weights, &corpus.heldout, 32, 9)?;
    t.run(&corpus.train, None, |step, loss| {
        if step % 100 == 0 {
            println!("step {step:>4}  loss {loss:.4}");
        }
        Ok(())
    })?;
    let after = mlm_eval(&t.weights, &corpus.heldout, 32, 9)?;
    println!("uniform baseline  {:.4}", (vocab as f64).ln());
    println!("heldout at init   {:.4}", before.loss);
    println!("heldout trained   {:.4} (accuracy {:.3})", after.loss, after.accuracy);
    Ok(())
}
