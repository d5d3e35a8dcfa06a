//! Dense fp64 tensors and the reverse-mode autodiff tape used by every model
//! computation.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_coords};
pub use graph::{Graph, Var, NORM_EPS};
pub use params::{Bound, ParamStore};
pub use rng::{seeded, Rng, Stream};
pub use tensor::Tensor;
