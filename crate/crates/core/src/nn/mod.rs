//! The conditional velocity network and its training plumbing.

mod adam;
mod checkpoint;
mod lora;
mod net;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use lora::{LoraAdapter, LoraSet, LoraView};
pub use net::{NetConfig, NetInputs, ParamStore, ParamVars, TimeEmbedding, VelocityNet};
