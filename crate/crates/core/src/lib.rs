//! Conditional rectified-flow video colour/illumination editing at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with a tape-based reverse-mode autodiff graph.
//! - [`nn`]: the conditional velocity network, low-rank adapters, Adam and
//!   the binary checkpoint container.
//! - [`perturb`]: structure-destroying and colour-destroying perturbations
//!   used to build self-supervised training pairs.
//! - [`flow`]: rectified-flow interpolation, losses, Euler sampling and
//!   residual-velocity trajectory rectification.
//! - [`trainer`]: the self-supervised training loop with the dual-branch
//!   consistency term.
//! - [`data`]: procedural scene rendering, paired samples and clip I/O.
//! - [`metrics`]: SSIM, Canny, Horn–Schunck and the fidelity metrics built
//!   on top of them.

pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod perturb;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
pub use flow::{ConditionSet, FlowState, ResidualMode, SamplerConfig, VelocityModel};
pub use nn::{LoraAdapter, LoraSet, NetConfig, VelocityNet};
pub use perturb::PerturbConfig;
pub use tensor::{Graph, Scalar, Tensor, Var};
pub use trainer::{TrainConfig, TrainStepReport};
pub use video::{GrayImage, Image, VelocityField, VideoClip};
