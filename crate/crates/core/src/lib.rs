//! CPU reference implementation of the Mixing Block (parallel window
//! attention and depth-wise convolution with bi-directional channel and
//! spatial interactions) and of the MixFormer backbone built from it.
//!
//! Everything runs in `f64` on one thread. Each differentiable op carries
//! an analytic backward pass that the test-suite checks against central
//! finite differences.

pub mod ablation;
pub mod attention;
pub mod autodiff;
pub mod block;
pub mod checks;
pub mod complexity;
pub mod data;
pub mod error;
pub mod interaction;
pub mod io;
mod kernels;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod window;

pub use autodiff::{ParamStore, Session, Tape, Var};
pub use complexity::{model_report, op_flops, ComplexityQuery, ComplexityReport, OpKind};
pub use data::{DatasetConfig, SyntheticDataset};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Layout, Tensor};
pub use train::{cross_entropy, train_toy, AdamW, ToyConfig, TrainConfig, TrainMetrics};
