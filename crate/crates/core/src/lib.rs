//! Spiking transformer kernel with structural re-parameterization.
//!
//! The crate trains a small multi-branch spiking network and rewrites it for
//! inference: parallel depthwise branches and their temporal sliding batch
//! norms collapse into one per-timestep convolution, and norms that feed a
//! spike threshold fold into the threshold itself.

pub mod energy;
pub mod error;
pub mod fold;
pub mod io;
pub mod lif;
pub mod model;
pub mod spatial;
pub mod tensor;
pub mod tsbn;

pub use error::{Error, Result};
pub use tensor::{Param, Scalar, Tape, Tensor, Var};

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
