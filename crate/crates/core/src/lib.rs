pub mod action_expert;
pub mod autodiff;
pub mod camera;
pub mod error;
pub mod gst;
pub mod nn;
pub mod params;
pub mod reasoner;
pub mod rng;
pub mod scene_synth;
pub mod splat_render;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
