pub mod autograd;
pub mod backbone;
pub mod config;
pub mod ddmp;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod kitti;
pub mod losses;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Backward, ConvOptions, ResizeMode, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
