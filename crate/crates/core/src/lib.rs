//! CliffordNet: an isotropic vision backbone whose only token mixer is the
//! sparse rolling Clifford geometric product, built on a small reverse-mode
//! autodiff engine.
//!
//! Modules:
//!
//! - [`tensor`]: dense channel-last tensors and the autodiff [`tensor::Graph`]
//! - [`geometry`]: shifted inner/wedge products and the dense `D×D` oracle
//! - [`network`]: context operators, the block, model presets and checkpoints
//! - [`data`]: CIFAR binary loading, normalization, augmentation, batching
//! - [`trainer`]: AdamW, cosine schedule, training and evaluation loops
//! - [`verify`]: the invariant suite behind `cliffordnet verify`
//! - [`bench`]: linear-complexity timing harness behind `cliffordnet bench`
//! - [`cli`]: run configuration, `--override` handling and the subcommands
//!
//! The `examples/` directory has one runnable program per capability.

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod network;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
