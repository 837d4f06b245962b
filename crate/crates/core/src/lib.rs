//! Channel-wise mixed-precision post-training quantization for small
//! action-producing policy networks.
//!
//! The pipeline scores how much each output channel moves the action when
//! quantized ([`sensitivity`]), assigns per-channel bit-widths under an
//! average-bit budget ([`allocator`]), applies them ([`quant`]) and measures
//! the result in closed loop ([`simenv`]).

pub mod allocator;
pub mod cli;
pub mod error;
pub mod model;
pub mod quant;
pub mod sensitivity;
pub mod simenv;
pub mod tensor;

pub use allocator::{
    average_bits, brute_force_allocate, greedy_allocate, BitAllocation, PruneGuardConfig,
};
pub use error::{Error, Result};
pub use model::{Activation, ChannelId, Layer, Policy, PolicyModel, Tag};
pub use quant::{apply_allocation, BitMap, BitWidth, QuantizedModel};
pub use sensitivity::{CalibrationSet, Method, SensitivityEngine, SensitivityTable};
pub use simenv::{EnvConfig, Environment};
pub use tensor::{Matrix, Vector};
