//! Full recipe: `lite` on CIFAR-100 for 200 epochs with AdamW and cosine
//! annealing. Expect many hours on a CPU; not part of the test suite.
//!
//! ```text
//! CIFAR100_DIR=/data/cifar-100-binary cargo run --release --example long_run -- [out_dir]
//! ```
//!
//! The directory must hold `train.bin` and `test.bin` from the binary
//! archive. History and checkpoint go to `out_dir` (default `runs/lite`).
//! Top-1 should approach, but is not guaranteed to reach, the high 70s:
//! the augmentation policy here is crop, flip and erasing only.

use std::path::PathBuf;

use cliffordnet::data::{load_cifar_dir, CifarVariant, Split};
use cliffordnet::network::{CliffordNet, ModelConfig};
use cliffordnet::trainer::{save_checkpoint, train, TrainConfig};

fn main() -> cliffordnet::Result<()> {
    let dir = std::env::var("CIFAR100_DIR").map_err(|_| {
        cliffordnet::Error::Usage("set CIFAR100_DIR to the extracted cifar-100-binary directory".into())
    })?;
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/lite".into()));
    std::fs::create_dir_all(&out)?;

    let train_set = load_cifar_dir(&dir, CifarVariant::Cifar100, Split::Train)?;
    let test_set = load_cifar_dir(&dir, CifarVariant::Cifar100, Split::Test)?;
    let config = ModelConfig::preset("lite")?;
    let mut model = CliffordNet::seeded(&config, 0)?;
    let cfg = TrainConfig::default();
    let history = train(&mut model, &train_set, &test_set, &cfg, |r| {
        println!(
            "epoch {:>3} lr {:.2e} loss {:.4} top1 {:.4} ({:.0}s)",
            r.epoch, r.lr, r.train_loss, r.eval_top1, r.wall_seconds
        );
    })?;
    history.write_csv(out.join("history.csv"))?;
    save_checkpoint(&model, out.join("model.ckpt"))?;
    Ok(())
}
