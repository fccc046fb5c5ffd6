//! Minimal CPU tensor engine: dense 2-D tensors, a reverse-mode tape, and
//! AdamW. Sized for desk-scale transformers, single-threaded and
//! deterministic.

mod attention;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{gemm, Tensor};
