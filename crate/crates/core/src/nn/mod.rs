//! Forward and backward passes for every layer kind the networks use.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod geometry;
pub mod loss;
pub mod pool;

pub use activation::{dropout, dropout_backward, relu, relu_backward, DropoutMask};
pub use batchnorm::{
    batchnorm3d_backward, batchnorm3d_forward, BatchNormCache, BatchNormState, Mode, BN_EPSILON,
    BN_MOMENTUM,
};
pub use conv::{conv3d_backward, conv3d_forward, ConvGrads};
pub use dense::{dense_backward, dense_forward};
pub use geometry::Padding;
pub use loss::{cross_entropy, cross_entropy_batch, one_hot, softmax, PROB_FLOOR};
pub use pool::{
    avgpool3d_global_backward, avgpool3d_global_forward, maxpool3d_backward, maxpool3d_forward,
    MaxPoolCache,
};
