//! Sequential-slice volumetric GAN on procedural chest phantoms.
//!
//! The pipeline: phantom volumes ([`voldata`]) feed a recurrent slice
//! generator with two discriminators ([`sgan`], [`latent`], [`losses`]),
//! quality is scored slice-wise ([`evalmetrics`]), nodule injection and
//! erasure edit volumes locally ([`nodulesim`]), and a small 3-d classifier
//! measures how useful the synthetic data is ([`detect`]). [`manifest`]
//! wires the stages together for the command line.

pub mod error;
pub mod evalmetrics;
pub mod latent;
pub mod manifest;
pub mod detect;
pub mod losses;
pub mod nodulesim;
pub mod sgan;
pub mod voldata;

pub use error::{Error, Result};
