//! Learnable parameter counts of every preset against the published budgets.
//!
//! ```text
//! cargo run --example param_budget
//! ```

use cliffordnet::network::{build_variant, param_count, VARIANTS};

fn main() -> cliffordnet::Result<()> {
    println!("{:<12} {:>10} {:>10} {:>9}", "variant", "params", "reference", "dev");
    for name in VARIANTS {
        let (config, model) = build_variant(name, 0)?;
        let n = param_count(&model);
        match config.reference_params() {
            Some(r) => println!("{name:<12} {n:>10} {r:>10.0} {:>+8.2}%", 100.0 * (n as f64 - r) / r),
            None => println!("{name:<12} {n:>10} {:>10} {:>9}", "-", "-"),
        }
    }
    Ok(())
}
