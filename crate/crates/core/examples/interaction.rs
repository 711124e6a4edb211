//! The rolling interaction on two small vectors, next to the dense products
//! it samples.
//!
//! ```text
//! cargo run --example interaction
//! ```

use cliffordnet::geometry::oracle::{dense_product_oracle, extract_slice};
use cliffordnet::geometry::{eval, CliMode, ShiftSet};
use cliffordnet::tensor::Tensor;

fn main() -> cliffordnet::Result<()> {
    let h = [1.0f32, 0.5, -0.25, 2.0, 0.0, -1.0];
    let c = [0.5f32, -1.5, 1.0, 0.25, 0.75, 2.0];
    let d = h.len();
    let (ht, ct) = (Tensor::new(&[d], h.to_vec())?, Tensor::new(&[d], c.to_vec())?);
    let dense = dense_product_oracle(&h, &c);

    for s in 1..d {
        let wedge = eval::shifted_wedge(&ht, &ct, s)?;
        let diag = extract_slice(&dense.wedge, d, s);
        println!("s={s} wedge {:?}", wedge.data());
        println!("    slice {:?}", diag);
    }

    // e1 ∧ e2: the bivector lands in channel 0 of the s=1 stream
    let e1 = Tensor::new(&[4], vec![1.0f32, 0.0, 0.0, 0.0])?;
    let e2 = Tensor::new(&[4], vec![0.0f32, 1.0, 0.0, 0.0])?;
    println!("e1^e2 (s=1) = {:?}", eval::shifted_wedge(&e1, &e2, 1)?.data());
    println!("e2^e1 (s=1) = {:?}", eval::shifted_wedge(&e2, &e1, 1)?.data());

    let shifts = ShiftSet::new(vec![1, 2])?;
    for mode in [CliMode::Inner, CliMode::Wedge, CliMode::Full] {
        let out = eval::clifford_interact(&ht, &ct, &shifts, mode)?;
        println!("{mode:?}: {} channels from D={d}, |S|={}", out.channels(), shifts.len());
    }
    Ok(())
}
