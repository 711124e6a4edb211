//! Context operators, the CliffordNet block, model assembly and presets.

mod block;
pub mod checkpoint;
mod config;
mod layers;
mod model;
mod param;

pub use block::{drop_path, gffn_g, make_context, CliffordBlock, LocalContext};
pub use config::{
    BlockConfig, CtxMode, LocalContextKind, ModelConfig, REFERENCE_PARAMS, VARIANTS,
};
pub use layers::{BatchNorm, DwConv, LayerNorm, Linear, Module, PatchEmbed, Slot, SlotMut};
pub use model::{build_variant, param_count, CliffordNet, PREDICT_CHUNK};
pub use param::{trunc_normal, Param};
