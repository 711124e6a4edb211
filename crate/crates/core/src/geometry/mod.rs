//! Sparse rolling Clifford interaction.
//!
//! For a state `h` and context `c` (both `[..., D]`) and a channel offset `s`,
//! the scalar stream is `silu(h ⊙ roll(c, s))` and the bivector stream is
//! `h ⊙ roll(c, s) − c ⊙ roll(h, s)`, where `roll(x, s)[k] = x[(k + s) mod D]`.
//! Channel `k` of the bivector stream is the coefficient of `e_k ∧ e_{k+s}`;
//! when `k + s` wraps past `D` the pair is stored in reversed orientation and
//! carries the opposite sign of the canonical (`i < j`) coefficient.
//!
//! Each shift recovers one wrapped diagonal of the dense `D×D` products, which
//! [`oracle`] computes directly for verification.

pub mod oracle;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Ordered channel offsets defining which diagonals are computed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ShiftSet(Vec<usize>);

impl ShiftSet {
    /// Offsets must be non-empty, strictly increasing and non-zero.
    pub fn new(offsets: Vec<usize>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::Config("shift set is empty".into()));
        }
        if offsets[0] == 0 {
            return Err(Error::Config(
                "shift 0 is not allowed (its bivector stream is identically zero)".into(),
            ));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "shift set {offsets:?} must be strictly increasing"
            )));
        }
        Ok(ShiftSet(offsets))
    }

    /// Exponential offsets `1, 2, 4, …` of the given length.
    pub fn exponential(count: usize) -> Result<Self> {
        Self::new((0..count).map(|i| 1usize << i).collect())
    }

    pub fn offsets(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty by construction")
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.max() >= dim {
            return Err(Error::Config(format!(
                "shift {} does not fit channel width {dim}",
                self.max()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for ShiftSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        ShiftSet::new(v)
    }
}

impl From<ShiftSet> for Vec<usize> {
    fn from(s: ShiftSet) -> Self {
        s.0
    }
}

/// Which geometric-product components feed the projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CliMode {
    Inner,
    Wedge,
    Full,
}

impl CliMode {
    /// Number of `D`-wide streams emitted per shift.
    pub fn streams(self) -> usize {
        match self {
            CliMode::Inner | CliMode::Wedge => 1,
            CliMode::Full => 2,
        }
    }

    /// Channel count of [`clifford_interact`]'s output.
    pub fn output_channels(self, shifts: &ShiftSet, dim: usize) -> usize {
        self.streams() * shifts.len() * dim
    }
}

impl fmt::Display for CliMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CliMode::Inner => "inner",
            CliMode::Wedge => "wedge",
            CliMode::Full => "full",
        })
    }
}

impl FromStr for CliMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(CliMode::Inner),
            "wedge" => Ok(CliMode::Wedge),
            "full" => Ok(CliMode::Full),
            other => Err(Error::Config(format!("unknown cli_mode {other:?}"))),
        }
    }
}

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, h: Var, c: Var) -> Result<()> {
    if g.shape(h) != g.shape(c) {
        return Err(Error::dims(op, g.shape(h), g.shape(c)));
    }
    Ok(())
}

/// Shifted generalized inner product `silu(h ⊙ roll(c, s))`.
pub fn shifted_dot<T: Real>(g: &mut Graph<T>, h: Var, c: Var, s: usize) -> Result<Var> {
    same_shape(g, "shifted_dot", h, c)?;
    let rc = g.roll_channels(c, s)?;
    let prod = g.mul(h, rc)?;
    Ok(g.silu(prod))
}

/// Shifted exterior product `h ⊙ roll(c, s) − c ⊙ roll(h, s)`.
pub fn shifted_wedge<T: Real>(g: &mut Graph<T>, h: Var, c: Var, s: usize) -> Result<Var> {
    same_shape(g, "shifted_wedge", h, c)?;
    let rc = g.roll_channels(c, s)?;
    let rh = g.roll_channels(h, s)?;
    let forward = g.mul(h, rc)?;
    let reverse = g.mul(c, rh)?;
    g.sub(forward, reverse)
}

/// Concatenated rolling interaction over every shift.
///
/// Channel layout: shifts in `ShiftSet` order; within a shift, `[wedge | dot]`
/// for [`CliMode::Full`], a single stream otherwise. The projection that
/// consumes this output (and the checkpoint format) depends on this order.
pub fn clifford_interact<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    c: Var,
    shifts: &ShiftSet,
    mode: CliMode,
) -> Result<Var> {
    same_shape(g, "clifford_interact", h, c)?;
    if shifts.is_empty() {
        return Err(Error::Config("empty shift set".into()));
    }
    let mut streams = Vec::with_capacity(mode.streams() * shifts.len());
    for &s in shifts.offsets() {
        let rc = g.roll_channels(c, s)?;
        // h ⊙ T_s(c) is shared by both streams
        let forward = g.mul(h, rc)?;
        if mode != CliMode::Inner {
            let rh = g.roll_channels(h, s)?;
            let reverse = g.mul(c, rh)?;
            streams.push(g.sub(forward, reverse)?);
        }
        if mode != CliMode::Wedge {
            streams.push(g.silu(forward));
        }
    }
    if streams.len() == 1 {
        return Ok(streams[0]);
    }
    g.concat_channels(&streams)
}

/// Tensor-level conveniences that run a single operation on a scratch graph.
pub mod eval {
    use super::*;
    use crate::tensor::Tensor;

    fn run<T: Real>(
        h: &Tensor<T>,
        c: &Tensor<T>,
        f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let cv = g.constant(c.clone());
        let out = f(&mut g, hv, cv)?;
        Ok(g.value(out).clone())
    }

    pub fn shifted_dot<T: Real>(h: &Tensor<T>, c: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
        run(h, c, |g, h, c| super::shifted_dot(g, h, c, s))
    }

    pub fn shifted_wedge<T: Real>(h: &Tensor<T>, c: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
        run(h, c, |g, h, c| super::shifted_wedge(g, h, c, s))
    }

    pub fn clifford_interact<T: Real>(
        h: &Tensor<T>,
        c: &Tensor<T>,
        shifts: &ShiftSet,
        mode: CliMode,
    ) -> Result<Tensor<T>> {
        run(h, c, |g, h, c| super::clifford_interact(g, h, c, shifts, mode))
    }
}

#[cfg(test)]
mod tests {
    use super::eval::{clifford_interact, shifted_dot, shifted_wedge};
    use super::{CliMode, Error, ShiftSet};
    use crate::tensor::Tensor;

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[data.len()], data.to_vec()).unwrap()
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    #[test]
    fn shift_set_validation() {
        assert!(ShiftSet::new(vec![]).is_err());
        assert!(ShiftSet::new(vec![0, 1]).is_err());
        assert!(ShiftSet::new(vec![2, 1]).is_err());
        assert!(ShiftSet::new(vec![1, 1]).is_err());
        let s = ShiftSet::exponential(5).unwrap();
        assert_eq!(s.offsets(), &[1, 2, 4, 8, 16]);
        assert!(s.check_dim(16).is_err());
        assert!(s.check_dim(17).is_ok());
        let parsed: ShiftSet = serde_json::from_str("[1,2,4]").unwrap();
        assert_eq!(parsed.offsets(), &[1, 2, 4]);
        assert!(serde_json::from_str::<ShiftSet>("[0,2]").is_err());
    }

    #[test]
    fn dot_examples() {
        let out = shifted_dot(&v(&[1.0, 1.0]), &v(&[1.0, 1.0]), 1).unwrap();
        for x in out.data() {
            assert!((x - 0.731_058_578_630_004_9).abs() < 1e-12);
        }
        let out = shifted_dot(&v(&[0.0, 0.0]), &v(&[3.0, -2.0]), 1).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
        let out = shifted_dot(&v(&[1.0, 2.0]), &v(&[3.0, 4.0]), 1).unwrap();
        // h ⊙ roll(c,1) = [1·4, 2·3]
        assert!((out.data()[0] - silu(4.0)).abs() < 1e-12);
        assert!((out.data()[1] - silu(6.0)).abs() < 1e-12);
        assert!((out.data()[0] - 3.9281).abs() < 1e-4);
        assert!((out.data()[1] - 5.9852).abs() < 1e-4);
    }

    #[test]
    fn wedge_examples() {
        let out = shifted_wedge(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), 1).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);
        let h = v(&[0.3, -1.1, 2.5, 0.7]);
        for s in 0..4 {
            let w = shifted_wedge(&h, &h, s).unwrap();
            assert!(w.data().iter().all(|&x| x == 0.0));
        }
        let c = v(&[1.3, 0.2, -0.4, 0.9]);
        for s in 1..4 {
            let a = shifted_wedge(&h, &c, s).unwrap();
            let b = shifted_wedge(&c, &h, s).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn interact_channel_counts_and_order() {
        let h = Tensor::<f32>::zeros(&[1, 2, 2, 64]);
        let full = clifford_interact(&h, &h, &ShiftSet::new(vec![1, 2]).unwrap(), CliMode::Full)
            .unwrap();
        assert_eq!(full.shape(), &[1, 2, 2, 256]);
        let inner = clifford_interact(&h, &h, &ShiftSet::exponential(5).unwrap(), CliMode::Inner)
            .unwrap();
        assert_eq!(inner.shape(), &[1, 2, 2, 320]);

        // D=4, h=e1, c=e2, S=[1]: wedge then dot
        let e1 = v(&[1.0, 0.0, 0.0, 0.0]);
        let e2 = v(&[0.0, 1.0, 0.0, 0.0]);
        let out = clifford_interact(&e1, &e2, &ShiftSet::new(vec![1]).unwrap(), CliMode::Full)
            .unwrap();
        let want = [1.0, 0.0, 0.0, 0.0, silu(1.0), 0.0, 0.0, 0.0];
        for (x, y) in out.data().iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn interact_rejects_mismatched_inputs() {
        let a = Tensor::<f32>::zeros(&[2, 8]);
        let b = Tensor::<f32>::zeros(&[2, 4]);
        let s = ShiftSet::new(vec![1]).unwrap();
        assert!(matches!(
            clifford_interact(&a, &b, &s, CliMode::Full),
            Err(Error::Dimension { .. })
        ));
        assert!(shifted_wedge(&a, &b, 1).is_err());
    }

    #[test]
    fn cli_mode_round_trips_through_text() {
        for m in [CliMode::Inner, CliMode::Wedge, CliMode::Full] {
            assert_eq!(m.to_string().parse::<CliMode>().unwrap(), m);
        }
        assert!("both".parse::<CliMode>().is_err());
    }
}
