//! Acceptance run: every criterion prints one PASS/FAIL line, and the process
//! exits non-zero if any failed. Criteria run one after another so the timing
//! checks have the machine to themselves.
//!
//! Smoke training reads the real CIFAR-10 archive from `CIFAR10_DIR` when it is
//! set and falls back to the procedural stand-in otherwise.

use std::process::ExitCode;
use std::time::Instant;

use cliffordnet::bench::{self, BenchConfig, RATIO_BAND, SHIFT_BAND};
use cliffordnet::data::{load_cifar_dir, normalize, synthetic, CifarVariant, Dataset, Split, IMAGE_BYTES};
use cliffordnet::network::{build_variant, param_count, CliffordNet, ModelConfig, Module, VARIANTS};
use cliffordnet::trainer::{evaluate, load_checkpoint, save_checkpoint, train, History, TrainConfig};
use cliffordnet::verify::{self, Rolling};

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> cliffordnet::Result<(bool, String)>) -> Line {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Line {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn report(line: &Line) {
    println!(
        "{} {:<22} {} [{:.1}s]",
        if line.passed { "PASS" } else { "FAIL" },
        line.name,
        line.detail,
        line.seconds
    );
}

fn oracle() -> Line {
    let mut line = timed("oracle-equivalence", || {
        let r = verify::oracle_equivalence(&Rolling, &[4, 8, 16], 100, 11);
        Ok((r.passed, format!("max_dev={:.2e} tol=1e-6 cases={}", r.max_deviation, r.cases)))
    });
    if line.seconds >= 5.0 {
        line.passed = false;
        line.detail.push_str(" (over 5 s)");
    }
    line
}

fn invariants() -> Line {
    timed("algebraic-invariants", || {
        let a = verify::anti_symmetry(&Rolling, 1000, 12);
        let s = verify::self_annihilation(&Rolling, 1000, 13);
        Ok((
            a.passed && s.passed,
            format!(
                "anti-symmetry max_dev={:e} self-annihilation max_dev={:e} cases={}+{}",
                a.max_deviation, s.max_deviation, a.cases, s.cases
            ),
        ))
    })
}

fn gradients() -> Line {
    let mut line = timed("gradient-correctness", || {
        let (f32r, f64r) = verify::block_gradients(21)?;
        Ok((
            f32r.passed && f64r.passed,
            format!(
                "f32 rel={:.2e} (<1e-3) f64 rel={:.2e} (<1e-6) over {} configurations",
                f32r.max_deviation, f64r.max_deviation, f32r.cases
            ),
        ))
    });
    if line.seconds >= 60.0 {
        line.passed = false;
        line.detail.push_str(" (over 60 s)");
    }
    line
}

fn identity() -> Line {
    timed("gamma-zero-identity", || {
        let r = verify::gamma_zero_identity(VARIANTS, 31)?;
        Ok((r.passed, format!("bitwise over {} blocks x modes, max_dev={:e}", r.cases, r.max_deviation)))
    })
}

fn budgets() -> Line {
    let mut line = timed("parameter-budgets", || {
        let mut ok = true;
        let mut parts = Vec::new();
        for name in ["nano", "lite", "net32", "net64"] {
            let (config, model) = build_variant(name, 0)?;
            let n = param_count(&model);
            let reference = config.reference_params().expect("published budget");
            let dev = (n as f64 - reference) / reference;
            ok &= dev.abs() <= 0.05;
            parts.push(format!("{name}={n} ({:+.2}%)", 100.0 * dev));
        }
        Ok((ok, parts.join(" ")))
    });
    if line.seconds >= 1.0 {
        line.passed = false;
        line.detail.push_str(" (over 1 s)");
    }
    line
}

fn complexity() -> Line {
    let mut line = timed("linear-complexity", || {
        let r = bench::run(&BenchConfig::default())?;
        let ratios: Vec<String> = r
            .scaling
            .iter()
            .filter(|row| row.tokens >= bench::ASSERT_FROM)
            .map(|row| format!("b{}:N{}={:.2}", row.beta, row.tokens, row.ratio.unwrap_or(f64::NAN)))
            .collect();
        Ok((
            r.passed(),
            format!(
                "{} in [{}, {}]; |S| 1->5 ratio {:.2} in [{}, {}]",
                ratios.join(" "),
                RATIO_BAND.0,
                RATIO_BAND.1,
                r.shift_ratio().unwrap_or(f64::NAN),
                SHIFT_BAND.0,
                SHIFT_BAND.1
            ),
        ))
    });
    if line.seconds >= 120.0 {
        line.passed = false;
        line.detail.push_str(" (over 2 min)");
    }
    line
}

fn smoke_data() -> cliffordnet::Result<(Dataset, Dataset, &'static str)> {
    Ok(match std::env::var("CIFAR10_DIR") {
        Ok(dir) => (
            load_cifar_dir(&dir, CifarVariant::Cifar10, Split::Train)?.take(5000),
            load_cifar_dir(&dir, CifarVariant::Cifar10, Split::Test)?.take(1000),
            "cifar10",
        ),
        Err(_) => (synthetic(5000, 7, Split::Train), synthetic(1000, 7, Split::Test), "synthetic"),
    })
}

fn smoke_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    }
}

fn smoke_run(seed: u64, train_set: &Dataset, test_set: &Dataset) -> cliffordnet::Result<(CliffordNet<f32>, History)> {
    let config = ModelConfig::preset("nano-mini")?;
    let mut model = CliffordNet::seeded(&config, seed)?;
    let history = train(&mut model, train_set, test_set, &smoke_config(seed), |r| {
        eprintln!(
            "  seed {seed} epoch {} loss {:.4} top1 {:.4} ({:.0}s)",
            r.epoch, r.train_loss, r.eval_top1, r.wall_seconds
        );
    })?;
    Ok((model, history))
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    for check in [oracle, invariants, gradients, identity, budgets, complexity] {
        let line = check();
        report(&line);
        lines.push(line);
    }

    let data = smoke_data();
    let mut first: Option<(CliffordNet<f32>, History)> = None;
    let smoke = timed("smoke-training", || {
        let (train_set, test_set, source) = data.as_ref().map_err(|e| cliffordnet::Error::Data(e.to_string()))?;
        let mut ok = true;
        let mut parts = vec![format!("{source} {}/{}", train_set.len(), test_set.len())];
        for seed in 0..3 {
            let start = Instant::now();
            let (model, history) = smoke_run(seed, train_set, test_set)?;
            let secs = start.elapsed().as_secs_f64();
            let top1 = history.epochs.last().map_or(0.0, |r| r.eval_top1);
            let (m1, m3) = (history.median_loss(1).unwrap(), history.median_loss(3).unwrap());
            ok &= top1 > 0.20 && m3 < m1 && secs < 1800.0;
            parts.push(format!("seed{seed}: top1={top1:.3} median1={m1:.3} median3={m3:.3} {secs:.0}s"));
            if seed == 0 {
                first = Some((model, history));
            }
        }
        Ok((ok, parts.join("; ")))
    });
    report(&smoke);
    lines.push(smoke);

    let determinism = timed("determinism", || {
        let (train_set, test_set, _) = data.as_ref().map_err(|e| cliffordnet::Error::Data(e.to_string()))?;
        let (_, reference) = first.as_ref().ok_or_else(|| cliffordnet::Error::Data("no smoke run".into()))?;
        let (_, again) = smoke_run(0, train_set, test_set)?;
        let same_csv = again.to_csv_untimed() == reference.to_csv_untimed();
        let same_losses = again.batch_losses == reference.batch_losses;
        Ok((
            same_csv && same_losses,
            format!("history CSV identical={same_csv}, per-batch losses identical={same_losses}"),
        ))
    });
    report(&determinism);
    lines.push(determinism);

    let roundtrip = timed("checkpoint-roundtrip", || {
        let (_, test_set, _) = data.as_ref().map_err(|e| cliffordnet::Error::Data(e.to_string()))?;
        let (model, _) = first.as_mut().ok_or_else(|| cliffordnet::Error::Data("no smoke run".into()))?;
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("smoke.ckpt");
        let before = evaluate(model, test_set, 256)?;
        let logits_before = model.predict(normalize(&test_set.images()[..64 * IMAGE_BYTES], test_set.variant))?;
        save_checkpoint(model, &path)?;
        let mut loaded = load_checkpoint(&path)?;
        let after = evaluate(&mut loaded, test_set, 256)?;
        let logits_after = loaded.predict(normalize(&test_set.images()[..64 * IMAGE_BYTES], test_set.variant))?;
        let tensors = model
            .named_tensors()
            .iter()
            .zip(loaded.named_tensors())
            .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let logits = logits_before
            .data()
            .iter()
            .zip(logits_after.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        Ok((
            before.to_bits() == after.to_bits() && tensors && logits,
            format!("top1 {before} -> {after}, tensors bitwise={tensors}, logits bitwise={logits}"),
        ))
    });
    report(&roundtrip);
    lines.push(roundtrip);

    println!("SKIP long-run (optional)       lite on full CIFAR-100 for 200 epochs: examples/long_run.rs");

    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
