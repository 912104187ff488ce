//! Learned lossless compression of volumetric image data: a recurrent
//! per-slice logistic model driving a range coder.

pub mod codec;
pub mod coder;
pub mod error;
pub mod model;
pub mod prob;
pub mod train;
pub mod volume;
pub mod weights;
