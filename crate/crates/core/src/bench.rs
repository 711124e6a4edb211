//! Timing harness for the linear-complexity claims: block forward time should
//! double when the token count doubles, and interaction time should grow
//! linearly with the number of shifts.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{clifford_interact, CliMode, ShiftSet};
use crate::network::{BlockConfig, CliffordBlock, ModelConfig};
use crate::tensor::{Graph, Tensor};

/// Token grids for N = 256 … 16384, each twice the previous.
pub const GRIDS: &[(usize, usize)] = &[
    (16, 16),
    (16, 32),
    (32, 32),
    (32, 64),
    (64, 64),
    (64, 128),
    (128, 128),
];

pub const RATIO_BAND: (f64, f64) = (1.6, 2.6);
/// Doubling ratios are asserted from this token count upwards.
pub const ASSERT_FROM: usize = 4096;
pub const SHIFT_BAND: (f64, f64) = (3.5, 6.5);

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub dim: usize,
    pub grids: Vec<(usize, usize)>,
    pub repeats: usize,
    pub seed: u64,
    pub shift_tokens: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dim: 128,
            grids: GRIDS.to_vec(),
            repeats: 9,
            seed: 0,
            shift_tokens: 4096,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScalingRow {
    pub beta: u8,
    pub tokens: usize,
    pub seconds: f64,
    /// Time relative to the previous row with the same β.
    pub ratio: Option<f64>,
}

impl ScalingRow {
    pub fn per_token_us(&self) -> f64 {
        1e6 * self.seconds / self.tokens as f64
    }
}

#[derive(Clone, Debug)]
pub struct ShiftRow {
    pub shifts: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub scaling: Vec<ScalingRow>,
    pub shifts: Vec<ShiftRow>,
    pub failures: Vec<String>,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Interaction time with the most shifts over time with the fewest.
    pub fn shift_ratio(&self) -> Option<f64> {
        let (first, last) = (self.shifts.first()?, self.shifts.last()?);
        Some(last.seconds / first.seconds)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("beta tokens   ms/forward  us/token  ratio\n");
        for r in &self.scaling {
            let ratio = r.ratio.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                out,
                "{:<4} {:<8} {:>10.2} {:>9.3}  {}",
                r.beta,
                r.tokens,
                1e3 * r.seconds,
                r.per_token_us(),
                ratio
            );
        }
        out.push_str("shifts  ms/interaction\n");
        for r in &self.shifts {
            let _ = writeln!(out, "{:<7} {:>10.3}", r.shifts, 1e3 * r.seconds);
        }
        if let Some(r) = self.shift_ratio() {
            let _ = writeln!(out, "shift ratio {:.2}", r);
        }
        for f in &self.failures {
            let _ = writeln!(out, "FAIL {f}");
        }
        out
    }
}

fn block_config(beta: u8) -> Result<BlockConfig> {
    let mut cfg = ModelConfig::preset("nano")?.block;
    cfg.beta = beta;
    cfg.drop_path_rate = 0.0;
    Ok(cfg)
}

/// Minimum eval-mode forward time of one block for each grid. Sizes are
/// visited round-robin, each with its own graph so buffer reuse never crosses
/// sizes, and a slow stretch of wall-clock time hits every size alike.
pub fn time_block(
    block: &mut CliffordBlock<f32>,
    grids: &[(usize, usize)],
    repeats: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let dim = block.gamma.len();
    let inputs: Vec<Tensor<f32>> = grids
        .iter()
        .map(|&(h, w)| Tensor::from_fn(&[1, h, w, dim], |_| rng.gen_range(-1.0f32..1.0)))
        .collect();
    let mut graphs: Vec<Graph<f32>> = grids.iter().map(|_| Graph::new()).collect();
    let mut noise = ChaCha8Rng::seed_from_u64(0);
    let mut best = vec![f64::INFINITY; grids.len()];
    // round 0 warms every graph's buffer pool and is not counted
    for round in 0..=repeats.max(1) {
        for ((x, g), best) in inputs.iter().zip(&mut graphs).zip(&mut best) {
            let t = Instant::now();
            g.reset();
            let xv = g.constant(x.clone());
            block.forward(g, xv, false, &mut noise)?;
            if round > 0 {
                *best = best.min(t.elapsed().as_secs_f64());
            }
        }
    }
    Ok(best)
}

/// Minimum time of the interaction alone for each shift count, with
/// exponential shift sets and the same round-robin schedule as [`time_block`].
pub fn time_interaction(
    dim: usize,
    tokens: usize,
    counts: &[usize],
    repeats: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let h = Tensor::from_fn(&[tokens, dim], |_| rng.gen_range(-1.0f32..1.0));
    let c = Tensor::from_fn(&[tokens, dim], |_| rng.gen_range(-1.0f32..1.0));
    let sets = counts.iter().map(|&n| ShiftSet::exponential(n)).collect::<Result<Vec<_>>>()?;
    let mut graphs: Vec<Graph<f32>> = counts.iter().map(|_| Graph::new()).collect();
    let mut best = vec![f64::INFINITY; counts.len()];
    for round in 0..=repeats.max(1) {
        for ((shifts, g), best) in sets.iter().zip(&mut graphs).zip(&mut best) {
            let t = Instant::now();
            g.reset();
            let hv = g.constant(h.clone());
            let cv = g.constant(c.clone());
            clifford_interact(g, hv, cv, shifts, CliMode::Full)?;
            if round > 0 {
                *best = best.min(t.elapsed().as_secs_f64());
            }
        }
    }
    Ok(best)
}

pub fn run(config: &BenchConfig) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = BenchReport::default();
    for beta in [0u8, 1] {
        let cfg = block_config(beta)?;
        let mut block = CliffordBlock::<f32>::new("bench", config.dim, &cfg, 0.0, &mut rng)?;
        let times = time_block(&mut block, &config.grids, config.repeats, &mut rng)?;
        let mut prev: Option<f64> = None;
        for (&grid, &seconds) in config.grids.iter().zip(&times) {
            let tokens = grid.0 * grid.1;
            let ratio = prev.map(|p| seconds / p);
            if let Some(r) = ratio {
                if tokens >= ASSERT_FROM && !(RATIO_BAND.0..=RATIO_BAND.1).contains(&r) {
                    report.failures.push(format!(
                        "beta={beta} N={tokens}: doubling ratio {r:.2} outside [{}, {}]",
                        RATIO_BAND.0, RATIO_BAND.1
                    ));
                }
            }
            report.scaling.push(ScalingRow {
                beta,
                tokens,
                seconds,
                ratio,
            });
            prev = Some(seconds);
        }
    }
    let counts = [1, 2, 5];
    let times = time_interaction(config.dim, config.shift_tokens, &counts, config.repeats, &mut rng)?;
    for (&shifts, &seconds) in counts.iter().zip(&times) {
        report.shifts.push(ShiftRow { shifts, seconds });
    }
    if let Some(r) = report.shift_ratio() {
        if !(SHIFT_BAND.0..=SHIFT_BAND.1).contains(&r) {
            report.failures.push(format!(
                "|S| 1 -> 5 interaction ratio {r:.2} outside [{}, {}]",
                SHIFT_BAND.0, SHIFT_BAND.1
            ));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_double() {
        for w in GRIDS.windows(2) {
            assert_eq!(w[1].0 * w[1].1, 2 * w[0].0 * w[0].1);
        }
        assert_eq!(GRIDS[0].0 * GRIDS[0].1, 256);
        assert_eq!(GRIDS[GRIDS.len() - 1].0 * GRIDS[GRIDS.len() - 1].1, 16384);
    }

    #[test]
    fn small_run_reports_every_row() {
        let cfg = BenchConfig {
            dim: 16,
            grids: vec![(4, 4), (4, 8)],
            repeats: 1,
            seed: 0,
            shift_tokens: 64,
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.scaling.len(), 4);
        assert!(r.scaling[0].ratio.is_none() && r.scaling[1].ratio.is_some());
        assert_eq!(r.shifts.len(), 3);
        assert!(r.render().contains("shift ratio"));
    }
}
