//! Multi-spectral channel attention.
//!
//! Channel attention squeezes each `H x W` feature map to one number before
//! an fc head turns those numbers into per-channel gates. Global average
//! pooling is the `(0, 0)` term of an unnormalized 2D DCT; this crate
//! generalizes the squeeze to arbitrary DCT components, one per group of
//! channels, and provides:
//!
//! * [`tensor`]: a small dense tensor type and its file formats;
//! * [`dct`]: the 2D DCT, its bases, and precomputed filter banks;
//! * [`attention`]: the attention block with analytic gradients;
//! * [`selection`]: low-frequency, two-step, and searched component choice;
//! * [`harness`]: synthetic data, a tiny CNN, SGD, and the experiment drivers.

pub mod attention;
pub mod dct;
pub mod error;
pub mod harness;
pub mod selection;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
