//! Dense-matrix numerical core: tensors, a reverse-mode tape with a
//! stop-gradient operator, Adam, a finite-difference oracle, and the
//! model-wide PRNG.

pub mod adam;
pub mod fd;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, AdamHyper, AdamOptimizer, AdamState};
pub use fd::{finite_difference_at, finite_difference_gradient, max_rel_error, max_rel_error_at};
pub use graph::{Graph, ReplayLog, Var, NEG_INF_MASK};
pub use params::{Param, ParamStore};
pub use rng::ModelRng;
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};
