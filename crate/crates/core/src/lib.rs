//! Multi-fidelity Gaussian process surrogates with gradient-based parameter
//! space reduction.
//!
//! The crate builds two-level (or deeper) nonlinear autoregressive GP models
//! where the low-fidelity level can be synthesized from a single
//! high-fidelity dataset: gradients of the quantity of interest drive either
//! an active subspace projection or an invertible level-set network, a cheap
//! response surface is fitted over the reduced coordinates, and its
//! predictions populate the low-fidelity training set.

pub mod benchmarks;
pub mod data;
pub mod error;
pub mod gp;
pub mod harness;
pub mod kernel;
pub mod levelset;
pub mod nargp;
pub mod optimize;
pub mod pipeline;
pub mod reducer;
pub mod sampling;
pub mod seed;
pub mod subspace;

pub use data::{Bounds, Dataset, FidelityPair};
pub use error::{Error, Result};
