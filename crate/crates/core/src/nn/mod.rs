//! Minimal CPU tensor engine: channel-major 4-d tensors and layers with
//! hand-written backward passes.

mod layers;
mod param;
mod scalar;
mod tensor;

pub use layers::{
    BatchNorm2d, BilinearUpsample, BnState, ChannelStats, Conv2d, GlobalAvgPool, GradFlags,
    MaxPool2, Mode, Relu,
};
pub use param::Param;
pub use scalar::Real;
pub use tensor::{argmax_channels, log_softmax_channels, softmax_backward, softmax_channels, Tensor};
