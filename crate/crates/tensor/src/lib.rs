//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape rebuilt on every forward pass. Operations append
//! nodes holding their output value; [`Graph::backward`] sweeps the tape in
//! reverse and returns [`Gradients`] for every node that depends on a
//! trainable leaf. Parameters live outside the tape in a [`ParamSet`] and
//! are bound per forward with [`Graph::param`].

mod attention;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use attention::{Attention, AttentionMask, MASKED_SCORE};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS, LOG_EPS, NORM_EPS};
pub use params::ParamSet;
pub use tensor::Tensor;
