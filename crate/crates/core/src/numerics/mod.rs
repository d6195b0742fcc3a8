//! Deterministic `f64` tensors, a tape-based reverse-mode differentiator,
//! finite-difference gradient checking and AdamW.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, primitive_suite, OpCheck, LINEAR_TOL, NONLINEAR_TOL};
pub use graph::{softmax_in_place, Graph, Var, LAYER_NORM_EPS};
pub use optim::{sum_grads, AdamW, AdamWConfig};
pub use params::{ParamStore, TrainableSet};
pub use rng::Rng;
pub use tensor::Tensor;
