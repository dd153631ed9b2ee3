//! Liver and tumor segmentation with one-step and cascaded U-Nets.
//!
//! The crate carries its own small reverse-mode differentiation engine
//! ([`autodiff`]), the two network shapes ([`network`]), class-weighted
//! cross-entropy losses ([`losses`]), the cascade that masks the tumor
//! network's input with the liver network's output ([`pipeline`]), the SGD
//! training schedules ([`train`]) and the evaluation suite ([`metrics`]).
//! Synthetic phantoms and the on-disk formats live in [`data_io`]; [`cli`]
//! backs the `cascade-seg` binary.

pub mod autodiff;
pub mod cli;
pub mod data_io;
mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CheckpointFault, Error, Result};
pub use image::{BinaryMask, Image, Label, LabelMap, ProbabilityMap};
pub use network::{build_unet, Head, Network, NetworkParams, UNetConfig};
pub use rng::SeededRng;
pub use tensor::{Real, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/cascade.md")]
    mod cascade {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
