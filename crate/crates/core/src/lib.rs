//! Masked motion correction for 3D MRI volumes.
//!
//! The crate covers the whole pipeline: volume I/O and preprocessing,
//! block masking, the global-to-local attention U-Net with its output gate,
//! hand-written reverse-mode gradients and the Lion optimizer, masked
//! test-time prediction, image-quality metrics, and a synthetic phantom and
//! k-space motion simulator used to produce paired training data.

pub mod attention;
pub mod error;
pub mod forge;
pub mod g2l;
pub mod layers;
pub mod masking;
pub mod metrics;
pub mod net;
pub mod params;
pub mod real;
pub mod tensor;
pub mod train;
pub mod ttp;
pub mod volume;

pub use error::{Error, Result};
