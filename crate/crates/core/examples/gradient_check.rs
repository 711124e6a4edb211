//! Finite-difference gradient check of one block for every interaction mode,
//! context mode and β, in single and double precision.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use cliffordnet::geometry::CliMode;
use cliffordnet::network::CtxMode;
use cliffordnet::verify::{grad_check_block, grad_check_model, DOUBLE_TOL, SINGLE_TOL};

fn main() -> cliffordnet::Result<()> {
    println!("{:<6} {:<5} {:<4} {:>10} {:>10}", "cli", "ctx", "beta", "f32", "f64");
    let mut seed = 0;
    for cli in [CliMode::Inner, CliMode::Wedge, CliMode::Full] {
        for ctx in [CtxMode::Diff, CtxMode::Abs] {
            for beta in [0, 1] {
                let e = grad_check_block(cli, ctx, beta, seed)?;
                seed += 1;
                println!(
                    "{:<6} {:<5} {:<4} {:>10.2e} {:>10.2e}",
                    format!("{cli:?}").to_lowercase(),
                    ctx.to_string(),
                    beta,
                    e.single,
                    e.double
                );
            }
        }
    }
    let m = grad_check_model(99)?;
    println!("two-block model: f32 {:.2e}, f64 {:.2e}", m.single, m.double);
    println!("tolerances: f32 {SINGLE_TOL:e}, f64 {DOUBLE_TOL:e}");
    Ok(())
}
