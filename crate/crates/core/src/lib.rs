//! Shared-information analysis for masked reconstruction over hierarchical
//! latent-variable models.
//!
//! * [`graph`]: the data-generating DAG and its structural queries.
//! * [`locate`]: the shared latent set `c` induced by a mask, its companion
//!   sets and an exhaustive minimality oracle.
//! * [`scm`]: an invertible structural causal model over a graph.
//! * [`mae`]: a toy masked autoencoder with hand-written backpropagation.
//! * [`ident`]: block-identifiability scores between learned and true blocks.

pub mod fixtures;
pub mod graph;
pub mod ident;
pub mod locate;
pub mod mae;
pub mod scalar;
pub mod scm;

pub use graph::{LatentGraph, Mask, NodeId, NodeKind, NodeSet};
pub use locate::{ConditionReport, SharedInfo};
pub use scalar::Scalar;
pub use scm::{Dataset, ScmConfig, ScmSpec};

pub type Scm = ScmSpec<f64>;
pub type Data = Dataset<f64>;
pub type Model = mae::MaeModel<f64>;
pub type Scm32 = ScmSpec<f32>;
pub type Data32 = Dataset<f32>;
pub type Model32 = mae::MaeModel<f32>;
