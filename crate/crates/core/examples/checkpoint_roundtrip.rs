//! Saves a briefly trained model, loads it back and checks that evaluation
//! and every stored tensor are bit-identical.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip
//! ```

use cliffordnet::data::{synthetic, Split};
use cliffordnet::network::{CliffordNet, ModelConfig, Module};
use cliffordnet::trainer::{evaluate, load_checkpoint, save_checkpoint, train, TrainConfig};

fn main() -> cliffordnet::Result<()> {
    let train_set = synthetic(256, 1, Split::Train);
    let test_set = synthetic(128, 1, Split::Test);
    let mut config = ModelConfig::preset("nano-mini")?;
    config.depth = 2;
    let mut model = CliffordNet::seeded(&config, 3)?;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    train(&mut model, &train_set, &test_set, &cfg, |_| {})?;

    let path = std::env::temp_dir().join("cliffordnet-roundtrip.ckpt");
    let before = evaluate(&mut model, &test_set, 64)?;
    save_checkpoint(&model, &path)?;
    let mut loaded = load_checkpoint(&path)?;
    let after = evaluate(&mut loaded, &test_set, 64)?;

    let identical = model
        .named_tensors()
        .iter()
        .zip(loaded.named_tensors())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("{} bytes at {}", std::fs::metadata(&path)?.len(), path.display());
    println!("top1 before {before} after {after}, tensors identical: {identical}");
    std::fs::remove_file(&path)?;
    Ok(())
}
