//! Reverse-mode differentiation, the MLP feature extractor and AdamW.

mod adam;
mod gradcheck;
mod graph;
mod mlp;
mod params;

pub use adam::{adam_step, adam_step_masked, AdamConfig, AdamState, Schedule};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub(crate) use graph::softmax_rows as graph_softmax_rows;
pub use graph::{sigmoid, softplus, Graph, NodeId};
pub use mlp::{batch_matrix, Activation, Mlp, MlpConfig};
pub use params::{Gradient, ParamStore};
