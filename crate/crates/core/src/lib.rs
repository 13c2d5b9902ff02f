//! Bayesian tensor-on-tensor regression with voxel-wise Gaussian-process
//! varying coefficients.
//!
//! The outcome image of subject `n` is modelled voxel by voxel as
//!
//! ```text
//! Y_n(v) = Γ(v) + Θ(v) M_{n,v}(X_P,n(v)) + Σ_s D_s(v) z_ns + E_n(v)
//! ```
//!
//! where `Γ`, `Θ` and `D_s` are low-rank CP tensors with AR(1)-correlated
//! margins, and `M_{·,v}` is an independent Gaussian process per voxel over
//! the `h^D` input patch centred at `v`. Posterior inference is by Gibbs
//! sampling with Metropolis-Hastings steps for the lengthscales; held-out
//! subjects are predicted by kriging with the atoms integrated out.

pub mod dist;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod rng;
pub mod sampler;
pub mod select;
pub mod simgen;
pub mod tensor;

pub use error::{Error, Result};
