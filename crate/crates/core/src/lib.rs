//! Core machinery for joint face detection and 360° head pose estimation.
//!
//! * [`rotgeom`]: Euler angles, rotation matrices, pose vectors and the
//!   SVD-based projection onto the nearest proper rotation.
//! * [`losses`]: the detection + pose multitask objective with analytic
//!   gradients and a central-difference checker.
//! * [`gridcodec`]: the `(bs, 3*(5+cls+np), K, K)` output tensor, target
//!   encoding, decoding, IoU and NMS.
//! * [`evalproto`]: detection IoU and per-angle MAE reporting.
//! * [`tensorfile`]: the binary tensor container shared by tensors and weights.

pub mod error;
pub mod evalproto;
pub mod gridcodec;
pub mod losses;
pub mod rotgeom;
pub mod tensorfile;

pub use error::{Error, Result};
