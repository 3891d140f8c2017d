pub mod align;
pub mod archive;
pub mod dataseq;
pub mod discriminator;
pub mod error;
pub mod frame;
pub mod generator;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod synth;
pub mod tensor;
pub mod trainer;

mod conv;

pub use error::{Error, Result};
pub use frame::{Frame, FrameSequence};
pub use graph::{Gradients, Tape, Var};
pub use tensor::{Real, Shape, Tensor};
