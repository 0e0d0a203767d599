//! Parameter totals for the standard BERT shapes and their distilled students.
use wid::model::{param_count, ModelConfig};

fn main() -> wid::Result<()> {
    let base = ModelConfig::bert(30522, 768, 12, 12)?;
    let wid55 = ModelConfig::bert(30522, 516, 12, 12)?;
    let wid11 = ModelConfig::bert(30522, 192, 12, 12)?;
    for (name, cfg) in [("teacher d=768", &base), ("student d=516", &wid55), ("student d=192", &wid11)] {
        println!(
            "{name:<14} A={:<2} L={:<2} d_f={:<5} params {:>7.2}M",
            cfg.heads,
            cfg.layers,
            cfg.ffn,
            param_count(cfg) as f64 / 1e6
        );
    }
    Ok(())
}
