//! Semi-structured deep distributional regression.
//!
//! Every parameter of a response distribution gets an additive predictor
//! built from a formula: linear and factor terms, penalized smooths, tensor
//! products, offsets and neural networks. Networks can be constrained to the
//! orthogonal complement of structured terms so both stay identifiable.

pub mod basis;
pub mod cli;
pub mod compute_graph;
pub mod data;
pub mod families;
pub mod formula;
pub mod linalg;
pub mod model_api;
pub mod orthogonalization;
pub mod trainer;
