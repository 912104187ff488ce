//! Probability model: masked and standard convolutions over the current
//! slice, a depthwise-separable convolution over the recurrent hidden state,
//! the parameter-free fusion gate, and the linear logistic estimator.

mod forward;
pub mod layers;
mod params;
mod stream;

pub use forward::{
    dsc_forward, estimate, masked_conv_forward, normalize_slice, predict_slice,
    standard_conv_forward, update_hidden, GateFeatures, HiddenState, SlicePredictor,
};
pub use layers::{fusion_gate, hard_sigmoid, hard_tanh};
pub use params::{
    init_params, init_params_with_shape, parameter_count, quantize_weights_f16, Gradients,
    ModelParams, Shape, Tensors, TENSOR_NAMES,
};
pub use stream::{stream_forward, StreamEngine, StreamRow};
