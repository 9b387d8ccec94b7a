//! Minimal CPU tensor engine: convolutions, normalization layers and a
//! reverse-mode tape, generic over `f32`/`f64`.

pub mod checkpoint;
pub mod conv;
mod float;
pub mod optim;
mod params;
pub mod tape;
mod tensor;

pub use conv::{ConvGeom, PadMode};
pub use float::Float;
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
