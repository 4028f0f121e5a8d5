//! Neural emulation of chemical-kinetics box models.
//!
//! - [`tensor`]: f64 tensors with a reverse-mode tape.
//! - [`spectral`]: real DFT and the Fourier-layer channel mixing.
//! - [`nn`], [`model`]: layers and the encoder / attention / FNO / decoder emulator.
//! - [`objective`]: reconstruction, derivative, identity and mass losses; metrics.
//! - [`kinetics`]: mass-action mechanisms, a stiff integrator, datasets and their files.
//! - [`train`]: Adam, the training loop, checkpoints and ablation grids.
//! - [`config`]: `key = value` run configuration used by the CLI.

pub mod config;
pub mod error;
pub mod kinetics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod spectral;
pub mod tensor;
pub mod train;
mod workers;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{count_macs, time_grid, ChemNNEModel, ModelConfig};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use workers::worker_threads;
