//! Minimal dense-tensor numerical core: reverse-mode gradients over a closed
//! op set, transformer blocks with causal or bidirectional attention, Adam,
//! and a checksummed binary checkpoint format.

mod attention;
pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use attention::{AttentionSpec, MaskMode};
pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;
