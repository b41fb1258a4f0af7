//! Identity-disentangled expression recognition on compressed video.

pub mod tensor;
pub mod codec;
pub mod mine;
pub mod synth;
pub mod model;
pub mod eval;
