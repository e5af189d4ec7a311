//! A small convolutional multitask network trained on synthetic markers.
//!
//! A shared backbone feeds a detection head and a pose head; the pose head
//! also sees the detection head's logits. Everything runs in `f64` on the
//! CPU with hand-written backward passes.

pub mod error;
pub mod infer;
pub mod layers;
pub mod model;
pub mod synth;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use model::{init_network, Model, ModelConfig, Part};
pub use synth::{gen_synthetic, read_dataset, write_dataset, Image, Sample};
pub use train::{train, train_step, Phase, PhaseSchedule, TrainHistory};
