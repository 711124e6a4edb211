//! Runs the full property suite: oracle equivalence, anti-symmetry,
//! self-annihilation, the γ=0 identity and finite-difference gradients.
//! Same output as `cliffordnet verify`.
//!
//! ```text
//! cargo run --release --example invariants
//! ```

use std::process::ExitCode;

fn main() -> cliffordnet::Result<ExitCode> {
    let results = cliffordnet::verify::run_all()?;
    for r in &results {
        println!("{r}");
    }
    Ok(if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
