//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass; each op stores a closure producing
//! its parents' gradients. Parameters live in a [`ParamStore`] and enter a
//! graph as leaves. Everything runs on one thread, so a fixed seed gives
//! bitwise-identical results.

mod attention;
mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod tensor;

pub use attention::{relative_positions, sinusoid_table, Mhsa, PosMode};
pub use gradcheck::{gradcheck, gradcheck_params, DEFAULT_EPS};
pub use graph::{Graph, Grads, Var};
pub use optim::{cosine_warmup, AdamW, AdamWConfig, LrSchedule};
pub use params::{Param, ParamId, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tensor::Tensor;
