pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod nonlocal;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{Checkpoint, Model, NetworkConfig, NetworkPlan};
pub use tensor::{DType, Tensor};
