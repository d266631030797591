//! Block-sparse video attention, GRPO for flow-matching models and
//! coarse-to-fine refinement flow matching, on a small deterministic CPU
//! substrate.
//!
//! * [`bsa`]: 3D block rearrangement, pooled block scoring, top-r / CDF-p
//!   selection, streaming sparse attention forward and backward, block-causal
//!   attention with a condition KV cache.
//! * [`ring`]: simulated ring context parallelism for block-sparse attention.
//! * [`flow`]: flow-matching training, SDE/ODE sampling and GRPO with fixed
//!   critical timestep, truncated noise, loss reweighting and max group std.
//! * [`refine`]: the refinement-stage flow path used for coarse-to-fine
//!   generation.

pub mod bsa;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod nn;
pub mod refine;
pub mod ring;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::VelocityNet;
pub use rng::SeededRng;
pub use tensor::Tensor;
