//! Dense arrays, reverse-mode differentiation, neural layers, the focal
//! loss and the Adam optimizer.

mod adam;
mod element;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod loss;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use element::{gemm, Element, MatRef};
pub use graph::{focal_term, Gradients, Graph, Padding, Var, P_MIN};
pub use layers::{
    additive_attention, additive_attention_graph, bilstm, bilstm_graph, lstm_cell, lstm_step,
    softmax, softmax_dense, softmax_dense_graph, AttentionOutput, AttentionParams,
    LstmCellParams, LstmVars,
};
pub(crate) use layers::normal_tensor;
pub use loss::{focal_loss, focal_loss_batch, FocalLossConfig};
pub use tensor::Tensor;
