//! Forward and backward passes for the fixed set of layers the denoiser uses.

mod conv;
mod layers;

pub use conv::{
    conv2d, conv2d_backward, transposed_conv2d, transposed_conv2d_backward, ConvGrads, ConvSpec,
    PaddingMode,
};
pub(crate) use conv::reflect_index;
pub use layers::{
    clip_intensity, clip_intensity_backward, concat_channels, concat_channels_backward, l1_loss,
    l1_loss_backward, prelu, prelu_backward, slice_channels,
};
