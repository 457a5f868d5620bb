//! Differentiable substrate: tensors on a reverse-mode tape, the layer
//! building blocks used by the detector and constrainer, SGD with momentum,
//! checkpoints and the finite-difference checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;

pub use gradcheck::{finite_diff_check, project_to_scalar, GradCheckOptions, GradCheckReport};
pub use graph::{ContrastTerm, Gradients, Graph, Mode, NodeId, Reduce};
pub use layers::{BatchNorm2d, Conv2d};
pub use optim::{Sgd, SgdConfig};
pub use params::{ParamId, ParamStore, Parameter};
