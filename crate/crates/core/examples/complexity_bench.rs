//! Block forward time over doubling token counts at D=128, with and without
//! the global branch, plus the interaction cost against the number of shifts.
//!
//! ```text
//! cargo run --release --example complexity_bench
//! ```

use cliffordnet::bench::{run, BenchConfig};

fn main() -> cliffordnet::Result<()> {
    let report = run(&BenchConfig::default())?;
    print!("{}", report.render());
    println!("{}", if report.passed() { "linear scaling holds" } else { "scaling check failed" });
    Ok(())
}
