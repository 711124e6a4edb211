use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CliMode, ShiftSet};

/// How the local context is combined with the detail stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtxMode {
    /// Context minus detail stream (λ = 1): a discrete-Laplacian-like high-pass.
    Diff,
    /// Raw local context (λ = 0).
    Abs,
}

impl fmt::Display for CtxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CtxMode::Diff => "diff",
            CtxMode::Abs => "abs",
        })
    }
}

impl FromStr for CtxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff" => Ok(CtxMode::Diff),
            "abs" => Ok(CtxMode::Abs),
            other => Err(Error::Config(format!("unknown ctx_mode {other:?}"))),
        }
    }
}

/// Shape of the local-context stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalContextKind {
    /// DWConv → BN → SiLU → DWConv → BN → SiLU (5×5 receptive field).
    Factorized,
    /// DWConv → BN → SiLU (3×3).
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub shifts: ShiftSet,
    pub cli_mode: CliMode,
    pub ctx_mode: CtxMode,
    /// 1 adds the global-context branch (gFFN-G) to every block.
    pub beta: u8,
    /// Initial LayerScale γ (the residual step size).
    pub layerscale_init: f64,
    /// Drop-path rate of the deepest block; rates ramp linearly from 0.
    pub drop_path_rate: f64,
    pub local_context: LocalContextKind,
}

impl BlockConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.shifts.check_dim(dim)?;
        if self.beta > 1 {
            return Err(Error::Config(format!("beta must be 0 or 1, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate must lie in [0, 1), got {}",
                self.drop_path_rate
            )));
        }
        if !self.layerscale_init.is_finite() {
            return Err(Error::Config("layerscale_init must be finite".into()));
        }
        Ok(())
    }

    pub fn global_context(&self) -> bool {
        self.beta == 1
    }

    /// Drop-path rate for block `index` of `depth`.
    pub fn drop_path_at(&self, index: usize, depth: usize) -> f64 {
        if depth <= 1 {
            return 0.0;
        }
        self.drop_path_rate * index as f64 / (depth - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant_name: String,
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub block: BlockConfig,
}

/// Published parameter budgets for the named variants.
pub const REFERENCE_PARAMS: &[(&str, f64)] = &[
    ("nano", 1.43e6),
    ("lite", 2.61e6),
    ("net32", 4.8e6),
    ("net64", 8.6e6),
    ("nano-gffng", 2.22e6),
    ("lite-gffng", 3.40e6),
];

pub const VARIANTS: &[&str] = &[
    "nano",
    "lite",
    "net32",
    "net64",
    "nano-gffng",
    "lite-gffng",
    "nano-mini",
];

impl ModelConfig {
    /// Named preset. All full-size variants share width 128; they differ in
    /// depth, shift set and interaction mode.
    pub fn preset(name: &str) -> Result<Self> {
        let (base, beta) = match name.strip_suffix("-gffng") {
            Some(base) => (base, 1),
            None => (name, 0),
        };
        let (dim, depth, shifts, cli_mode, classes) = match base {
            "nano" => (128, 12, vec![1, 2], CliMode::Full, 100),
            "lite" => (128, 12, vec![1, 2, 4, 8, 16], CliMode::Full, 100),
            "net32" => (128, 32, vec![1, 2, 4], CliMode::Full, 100),
            "net64" => (128, 64, vec![1, 2, 4, 8, 16], CliMode::Inner, 100),
            "nano-mini" => (64, 4, vec![1, 2], CliMode::Full, 10),
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant {name:?}; expected one of {VARIANTS:?}"
                )))
            }
        };
        let config = ModelConfig {
            variant_name: name.to_string(),
            image_size: 32,
            in_channels: 3,
            patch_size: 2,
            dim,
            depth,
            num_classes: classes,
            block: BlockConfig {
                shifts: ShiftSet::new(shifts)?,
                cli_mode,
                ctx_mode: CtxMode::Diff,
                beta,
                layerscale_init: 1e-2,
                drop_path_rate: 0.1,
                local_context: LocalContextKind::Factorized,
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.depth == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "dim, depth, num_classes and in_channels must be positive".into(),
            ));
        }
        self.block.validate(self.dim)
    }

    /// Side length of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn reference_params(&self) -> Option<f64> {
        REFERENCE_PARAMS
            .iter()
            .find(|(n, _)| *n == self.variant_name)
            .map(|(_, p)| *p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for v in VARIANTS {
            let c = ModelConfig::preset(v).unwrap();
            assert_eq!(c.grid(), 16);
        }
        assert!(ModelConfig::preset("huge").is_err());
        let n = ModelConfig::preset("nano-gffng").unwrap();
        assert!(n.block.global_context());
        assert_eq!(ModelConfig::preset("lite").unwrap().block.shifts.len(), 5);
        assert_eq!(ModelConfig::preset("net32").unwrap().block.shifts.offsets(), &[1, 2, 4]);
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut c = ModelConfig::preset("nano").unwrap();
        c.block.drop_path_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset("nano").unwrap();
        c.dim = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset("nano").unwrap();
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset("nano").unwrap();
        c.block.beta = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn drop_path_ramps_linearly() {
        let c = ModelConfig::preset("nano").unwrap();
        assert_eq!(c.block.drop_path_at(0, 12), 0.0);
        assert!((c.block.drop_path_at(11, 12) - 0.1).abs() < 1e-12);
        assert_eq!(c.block.drop_path_at(0, 1), 0.0);
    }

    #[test]
    fn config_json_round_trip_rejects_unknown_fields() {
        let c = ModelConfig::preset("lite").unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        let bad = s.replace("\"depth\"", "\"layers\"");
        assert!(serde_json::from_str::<ModelConfig>(&bad).is_err());
    }
}
