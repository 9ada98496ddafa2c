//! Video frame interpolation by adaptive separable convolution.
//!
//! A U-shaped network looks at two neighboring frames and predicts, for every
//! output pixel, four 1D kernels. The middle frame is synthesized as the sum
//! of two separable local convolutions, one per input frame
//! ([`kernelconv`]). The rest of the crate covers what is needed to train and
//! evaluate such a network on a CPU: layers with hand-written backward passes
//! ([`nn`]), the network itself ([`network`]), losses ([`losses`]), dataset
//! preparation ([`data`]), the optimizer and training loop ([`train`]),
//! evaluation ([`eval`]) and frame-rate doubling ([`video`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod kernelconv;
pub mod losses;
pub mod network;
pub mod nn;
pub mod synthetic;
pub mod train;
pub mod video;

pub use crate::error::{Error, Result};
pub use crate::image::{Image, Scalar};
pub use crate::kernelconv::{KernelField, PaddedFrame};
