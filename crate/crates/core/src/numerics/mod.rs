//! Differentiable computation substrate: tensors, a recording tape with
//! reverse-mode gradients, recurrent layers, Adam and finite-difference
//! gradient checking.

mod adam;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport};
pub use graph::{Graph, Var, SELU_ALPHA, SELU_SCALE};
pub use layers::{glorot, lstm_cell, lstm_sequence, uniform, BiLstmParams, LstmParams};
pub use params::{ParamId, ParamTable, ParameterSet};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod primitive_tests;
