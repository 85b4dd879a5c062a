//! Minimal deterministic numeric substrate: shaped tensors, a reverse-mode
//! autodiff graph over a small set of primitives, a counter-based PRNG and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{gradcheck, GradCheckCfg, GradReport};
pub use graph::{Graph, Var};
pub use params::{Binding, ParamStore};
pub use rng::Prng;
pub use tensor::{Real, Tensor};
