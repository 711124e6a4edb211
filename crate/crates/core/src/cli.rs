//! Command-line front end: run configuration, `--override` handling and the
//! five subcommands. Everything writes to a caller-supplied sink so the
//! commands can be driven from tests.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench::{self, BenchConfig};
use crate::data::{load_cifar_dir, synthetic, CifarVariant, Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{checkpoint, CliffordNet, ModelConfig, Module};
use crate::trainer::{self, TrainConfig};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "cliffordnet", version, about = "CliffordNet training, evaluation and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Model preset (nano, lite, net32, net64, nano-gffng, lite-gffng, nano-mini).
    #[arg(long, global = true, default_value = "nano")]
    pub variant: String,

    /// Directory holding the CIFAR binary files.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,

    /// Seed for initialization, shuffling, augmentation and drop-path.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory for `train` (history CSV, config, checkpoint).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Checkpoint to write (`train`) or read (`eval`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    /// Dotted-path config edit, e.g. `trainer.epochs=1`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a model and write its history CSV and checkpoint.
    Train,
    /// Print top-1 accuracy on the test split as `top1=<float>`.
    Eval,
    /// Run the algebraic and gradient invariant suite.
    Verify,
    /// Time block forward passes over growing token counts.
    Bench,
    /// Print the learnable parameter count against the reference budget.
    Params,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: CifarVariant,
    /// Use at most this many training images (taken from the front).
    pub train_limit: Option<usize>,
    pub eval_limit: Option<usize>,
    /// Generate a procedural 10-class dataset instead of reading files.
    pub synthetic: bool,
    pub synthetic_train: usize,
    pub synthetic_eval: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: CifarVariant::Cifar100,
            train_limit: None,
            eval_limit: None,
            synthetic: false,
            synthetic_train: 5000,
            synthetic_eval: 1000,
            synthetic_seed: 7,
        }
    }
}

impl DataConfig {
    /// Loads a split, honouring the synthetic switch and the subset limits.
    pub fn load(&self, dir: Option<&Path>, split: Split) -> Result<Dataset> {
        let limit = match split {
            Split::Train => self.train_limit,
            Split::Test => self.eval_limit,
        };
        let data = if self.synthetic {
            let n = match split {
                Split::Train => self.synthetic_train,
                Split::Test => self.synthetic_eval,
            };
            synthetic(n, self.synthetic_seed, split)
        } else {
            let dir = dir.ok_or_else(|| {
                Error::Usage("no dataset: pass --data-dir or --override data.synthetic=true".into())
            })?;
            load_cifar_dir(dir, self.dataset, split)?
        };
        Ok(match limit {
            Some(n) => data.take(n),
            None => data,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Defaults for a preset; the dataset follows the head width.
    pub fn for_variant(variant: &str, seed: u64) -> Result<Self> {
        let model = ModelConfig::preset(variant)?;
        let dataset = if model.num_classes == 10 {
            CifarVariant::Cifar10
        } else {
            CifarVariant::Cifar100
        };
        Ok(RunConfig {
            model,
            trainer: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            data: DataConfig {
                dataset,
                ..DataConfig::default()
            },
        })
    }

    /// Applies `key=value` edits. Keys are dotted paths that must already
    /// exist; values are parsed as JSON, falling back to a bare string.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(&self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        let out: RunConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || Error::Usage(format!("unknown config key {key:?}"));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(unknown)?;
        let slot = map.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        if slot.is_null() {
            // optional sections start out absent; fill in their defaults
            if *part == "augment" {
                *slot = serde_json::to_value(crate::data::AugmentConfig::default())?;
            } else {
                return Err(unknown());
            }
        }
        node = slot;
    }
    Err(unknown())
}

/// Runs a parsed command line. `Ok(false)` means the command completed but a
/// check failed; the binary turns that into a non-zero exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    let config = RunConfig::for_variant(&cli.variant, cli.seed)?.with_overrides(&cli.overrides)?;
    match cli.command {
        Command::Train => cmd_train(cli, &config, out),
        Command::Eval => cmd_eval(cli, &config, out),
        Command::Verify => cmd_verify(out),
        Command::Bench => cmd_bench(cli, out),
        Command::Params => cmd_params(&config, out),
    }
}

fn cmd_train(cli: &Cli, config: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    let dir = cli.data_dir.as_deref();
    let train_set = config.data.load(dir, Split::Train)?;
    let eval_set = config.data.load(dir, Split::Test)?;
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&config.model.variant_name));
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(config)?)?;

    writeln!(
        out,
        "training {} ({} params) on {} train / {} eval images",
        config.model.variant_name,
        CliffordNet::<f32>::seeded(&config.model, cli.seed)?.param_count(),
        train_set.len(),
        eval_set.len()
    )?;
    let mut model = CliffordNet::seeded(&config.model, cli.seed)?;
    let mut io_err = None;
    let history = trainer::train(&mut model, &train_set, &eval_set, &config.trainer, |r| {
        if let Err(e) = writeln!(
            out,
            "epoch {:>3}  lr {:.3e}  loss {:.4}  top1 {:.4}  {:.1}s",
            r.epoch, r.lr, r.train_loss, r.eval_top1, r.wall_seconds
        ) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    history.write_csv(out_dir.join("history.csv"))?;
    let ckpt = cli.checkpoint.clone().unwrap_or_else(|| out_dir.join("model.ckpt"));
    trainer::save_checkpoint(&model, &ckpt)?;
    let last = history.epochs.last().map_or(0.0, |r| r.eval_top1);
    writeln!(out, "wrote {} and {}", out_dir.join("history.csv").display(), ckpt.display())?;
    writeln!(out, "top1={last}")?;
    Ok(true)
}

fn cmd_eval(cli: &Cli, config: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    let mut model = match &cli.checkpoint {
        Some(path) => checkpoint::load(path)?,
        None => CliffordNet::seeded(&config.model, cli.seed)?,
    };
    let data = config.data.load(cli.data_dir.as_deref(), Split::Test)?;
    if data.class_count() > model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.class_count(),
            model.config.num_classes
        )));
    }
    let top1 = trainer::evaluate(&mut model, &data, config.trainer.eval_batch_size)?;
    writeln!(out, "top1={top1}")?;
    Ok(true)
}

fn cmd_verify(out: &mut dyn Write) -> Result<bool> {
    let results = verify::run_all()?;
    for r in &results {
        writeln!(out, "{r}")?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        writeln!(out, "all {} properties passed", results.len())?;
    } else {
        writeln!(out, "failed: {}", failed.join(", "))?;
    }
    Ok(failed.is_empty())
}

fn cmd_bench(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    let report = bench::run(&BenchConfig {
        seed: cli.seed,
        ..BenchConfig::default()
    })?;
    write!(out, "{}", report.render())?;
    Ok(report.passed())
}

/// Allowed relative deviation from the reference parameter budget.
pub const PARAM_TOLERANCE: f64 = 0.05;

fn cmd_params(config: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    let model = CliffordNet::<f32>::seeded(&config.model, 0)?;
    let count = model.param_count();
    match config.model.reference_params() {
        Some(reference) => {
            let deviation = (count as f64 - reference) / reference;
            writeln!(
                out,
                "variant={} params={count} reference={reference} deviation={:+.2}%",
                config.model.variant_name,
                100.0 * deviation
            )?;
            Ok(deviation.abs() <= PARAM_TOLERANCE)
        }
        None => {
            writeln!(out, "variant={} params={count} reference=none", config.model.variant_name)?;
            Ok(true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cliffordnet").chain(args.iter().copied())).unwrap()
    }

    fn overrides(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_edit_nested_fields() {
        let c = RunConfig::for_variant("nano", 3)
            .unwrap()
            .with_overrides(&overrides(&[
                "trainer.epochs=1",
                "model.block.shifts=[1,2,4]",
                "model.block.ctx_mode=abs",
                "data.train_limit=100",
                "trainer.augment.hflip_prob=0",
            ]))
            .unwrap();
        assert_eq!(c.trainer.epochs, 1);
        assert_eq!(c.trainer.seed, 3);
        assert_eq!(c.model.block.shifts.offsets(), &[1, 2, 4]);
        assert_eq!(c.data.train_limit, Some(100));
        assert_eq!(c.trainer.augment.unwrap().hflip_prob, 0.0);
    }

    #[test]
    fn unknown_or_malformed_overrides_are_rejected() {
        let base = RunConfig::for_variant("nano", 0).unwrap();
        for bad in ["trainer.epochz=1", "model.dim.x=1", "epochs", "trainer.epochs=abc", "model.dim=2", "data.dataset=svhn"] {
            assert!(base.clone().with_overrides(&overrides(&[bad])).is_err(), "{bad}");
        }
    }

    #[test]
    fn augment_section_can_be_reenabled() {
        let c = RunConfig::for_variant("nano", 0)
            .unwrap()
            .with_overrides(&overrides(&["trainer.augment=null", "trainer.augment.erase_prob=0"]))
            .unwrap();
        assert_eq!(c.trainer.augment.unwrap().erase_prob, 0.0);
    }

    #[test]
    fn unknown_flags_fail_to_parse() {
        assert!(Cli::try_parse_from(["cliffordnet", "params", "--variantt", "nano"]).is_err());
        assert!(Cli::try_parse_from(["cliffordnet", "frobnicate"]).is_err());
    }

    #[test]
    fn params_reports_and_gates() {
        let mut buf = Vec::new();
        assert!(run(&parse(&["params", "--variant", "nano"]), &mut buf).unwrap());
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("variant=nano params=1437412 "), "{text}");

        let mut buf = Vec::new();
        let cli = parse(&["params", "--variant", "nano", "--override", "model.depth=24"]);
        assert!(!run(&cli, &mut buf).unwrap());
    }

    #[test]
    fn train_without_data_is_an_error() {
        let cli = parse(&["train", "--variant", "nano-mini"]);
        assert!(matches!(run(&cli, &mut Vec::new()), Err(Error::Usage(_))));
    }
}
