//! Long-term context attention tracking at desk scale.
//!
//! The crate is layered bottom-up: [`tensor`], [`graph`], [`optim`] and
//! [`gradcheck`] form the numeric substrate; [`position`] and [`lca`] hold the
//! multi-image attention; [`backbone`] and [`model`] assemble the network;
//! [`heads`] and [`boxes`] cover prediction and the training objective; and
//! [`update`] implements the confidence-driven template update.

pub mod backbone;
pub mod boxes;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod lca;
pub mod model;
pub mod optim;
pub mod position;
pub mod tensor;
pub mod update;

pub use boxes::BBox;
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, ParamStore, Var};
pub use tensor::Tensor;
