//! Exact forward and backward kernels composed by every higher layer.

pub mod conv;
pub mod dense;
pub mod layout;
pub mod pool;

pub use conv::{
    conv_backward_input, conv_backward_input_full, conv_backward_kernel, conv_backward_kernel_wide,
    conv_forward, dilate_and_pad, full_padding, valid_output_extent, ConvGrads, ConvParams,
    WideConvGrads,
};
pub use dense::{
    linear_backward, linear_forward, relu_backward, relu_forward, LinearGrads, LinearParams,
};
pub use layout::{concat_spatial, crop, Placement, SpatialAssembler};
pub use pool::{
    avgpool_backward, avgpool_forward, maxpool_backward, maxpool_forward, ArgmaxMap,
};
