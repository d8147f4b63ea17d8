//! Residual-binarized neural networks.
//!
//! Features are approximated by `M` levels of greedy residual binarization
//! sharing one set of scaling factors per layer, weights by a single sign
//! bit and scale. Dot products reduce to `M` XnorPopcount operations.
//!
//! - [`bitcore`]: packed sign vectors and XnorPopcount.
//! - [`residual`]: the residual encoder, multi-level dot product, and code
//!   comparison used for max-pooling.
//! - [`netgraph`]: layer graph and the reference forward pass.
//! - [`train`]: straight-through training of dense networks.
//! - [`accelsim`]: streaming accelerator simulation and cost models.
//! - [`container`] and [`dataset`]: model files and dataset ingestion.

pub mod accelsim;
pub mod bitcore;
pub mod container;
pub mod dataset;
mod error;
pub mod fixed;
pub mod netgraph;
pub mod pool;
pub mod residual;
pub mod train;

pub use error::{Error, Result};
