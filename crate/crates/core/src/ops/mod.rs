//! Raw numeric kernels on flat row-major buffers. The tape in
//! [`crate::autodiff`] wires these into differentiable operations.

pub mod activation;
pub mod conv;
pub(crate) mod gemm;
pub mod linear;
pub mod loss;
pub mod pool;
pub mod resample;

pub use activation::{sigmoid, SPATIAL_STD_EPS};
pub use conv::{conv3d_output_shape, ConvSpec};
pub use pool::PoolSpec;
pub use resample::{ResampleMode, ResizePlan};
