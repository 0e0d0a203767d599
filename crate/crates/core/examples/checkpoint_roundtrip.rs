//! Save a model, load it back, and show that damaged files are refused.
use wid::io::{decode_checkpoint, encode_checkpoint};
use wid::model::{init_model, ModelConfig};
use wid::train::{load_model, save_model};

fn main() -> wid::Result<()> {
    let cfg = ModelConfig::bert(64, 32, 4, 2)?.with_max_seq_len(16);
    let w = init_model(&cfg, 7)?;
    let dir = std::env::temp_dir().join("wid_checkpoint_roundtrip");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    save_model(&path, &w)?;
    let back = load_model(&path)?;
    let identical = w
        .named()
        .into_iter()
        .zip(back.named())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("{} tensors, {} params, bit-identical: {identical}", w.named().len(), w.num_params());

    let mut bytes = encode_checkpoint(&w.clone().into_named())?;
    println!("header: {:?}", String::from_utf8_lossy(&bytes[..8]));
    bytes[0] = b'X';
    match decode_checkpoint(&bytes) {
        Ok(_) => println!("corrupted magic was accepted?"),
        Err(e) => println!("corrupted magic: {e} (exit code {})", e.exit_code()),
    }
    let good = encode_checkpoint(&w.into_named())?;
    match decode_checkpoint(&good[..good.len() - 3]) {
        Ok(_) => println!("truncated file was accepted?"),
        Err(e) => println!("truncated payload: {e}"),
    }
    Ok(())
}
