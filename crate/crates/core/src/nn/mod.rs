//! Minimal deterministic autodiff and layer toolkit shared by every network.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, Linear, UpConv, ZeroConv};
pub use optim::{Adam, AdamConfig, CosineSchedule};
pub use params::{ParamId, ParamStore};
pub use tensor::{gemm, DType, Float, Tensor};
