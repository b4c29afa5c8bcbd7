//! Object-interaction video captioning: a tape autodiff core, the
//! interaction and captioner models, data plumbing, training, decoding and
//! captioning metrics.

pub mod captioner;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod interaction;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Mode, Model, ModelConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
