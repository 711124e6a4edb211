//! Trains `nano-mini` for a few epochs on a 5,000-image CIFAR-10 subset.
//!
//! Uses the real archive when `CIFAR10_DIR` points at the extracted binary
//! files; otherwise a procedural 10-class stand-in is generated.
//!
//! ```text
//! cargo run --release --example smoke_train -- [seed] [epochs]
//! ```

use std::env;

use cliffordnet::data::{load_cifar_dir, synthetic, CifarVariant, Split};
use cliffordnet::network::{CliffordNet, ModelConfig};
use cliffordnet::trainer::{train, TrainConfig};

fn main() -> cliffordnet::Result<()> {
    let mut args = env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let epochs: usize = args.next().map_or(5, |s| s.parse().expect("epochs"));

    let (train_set, test_set, source) = match env::var("CIFAR10_DIR") {
        Ok(dir) => (
            load_cifar_dir(&dir, CifarVariant::Cifar10, Split::Train)?.take(5000),
            load_cifar_dir(&dir, CifarVariant::Cifar10, Split::Test)?.take(1000),
            "cifar10",
        ),
        Err(_) => (
            synthetic(5000, 7, Split::Train),
            synthetic(1000, 7, Split::Test),
            "synthetic",
        ),
    };
    println!("data: {source}, {} train / {} test", train_set.len(), test_set.len());

    let config = ModelConfig::preset("nano-mini")?;
    let mut model = CliffordNet::seeded(&config, seed)?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &train_set, &test_set, &cfg, |r| {
        println!(
            "epoch {} lr {:.2e} loss {:.4} top1 {:.3} ({:.0}s)",
            r.epoch, r.lr, r.train_loss, r.eval_top1, r.wall_seconds
        );
    })?;
    print!("{}", history.to_csv());
    Ok(())
}
