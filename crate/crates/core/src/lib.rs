//! Joint single/multi-objective reward modeling on a desk.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense `f64` matrices, covariance, Jacobi eigensolver,
//!   inverse square roots and spectral norms.
//! * [`diffnet`]: reverse-mode autodiff, the MLP feature extractor and AdamW.
//! * [`world`]: hidden ground-truth scorers and preference/attribute data.
//! * [`model`]: the shared-backbone reward model with a Bradley–Terry head
//!   and a multi-attribute regression head, its losses and training loop.
//! * [`theory`]: population moments, the coupling decomposition and the
//!   Fisher-information oracles.
//! * [`rlhf`]: Best-of-N, PPO-lite, and reward-hacking diagnostics.

pub mod diffnet;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rlhf;
pub mod rng;
pub mod stats;
pub mod theory;
pub mod world;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/worlds.md")]
    mod worlds {}
    #[doc = include_str!("../../../book/src/reward-models.md")]
    mod reward_models {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/policy-optimization.md")]
    mod policy_optimization {}
}
