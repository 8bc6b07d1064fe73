//! Minimal tensor and autodiff machinery for 2-D convolutional networks.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use optim::{poly_decay, Adam, PlateauSchedule, Sgd};
pub use params::ParamStore;
pub use tensor::Tensor;
