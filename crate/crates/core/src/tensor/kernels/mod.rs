//! Graph-free forward/backward kernels. The [`Graph`](super::Graph) wraps
//! these; evaluation code that needs no gradients may call them directly.

mod conv;
mod norm;
mod pool;
mod sample;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use norm::{batchnorm_backward, batchnorm_eval, batchnorm_train, BnSaved};
pub use pool::{
    avgpool2d_backward, avgpool2d_forward, maxpool2d_backward, maxpool2d_forward,
    upsample_nearest_backward, upsample_nearest_forward,
};
pub use sample::{
    affine_grid_backward, affine_grid_forward, grid_sample_backward, grid_sample_forward,
    normalized_coord,
};
