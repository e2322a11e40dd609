//! Generative pipeline for complex-valued brain MRI patches.
//!
//! The pipeline runs in three stages over two-channel (real/imaginary)
//! image patches:
//!
//! 1. multi-coil k-space volumes are combined into single complex slices
//!    ([`ingest`]), masked and cut into 96x96 patches ([`patching`]);
//! 2. a sequence-conditioned variational autoencoder compresses patches
//!    into 2x48x48 latents ([`cvae`]) and a two-stage conditional flow
//!    matching model learns their distribution ([`flowmatch`]);
//! 3. classifier-based experiments measure distributional fidelity and
//!    downstream diagnostic utility of the synthetic data ([`evalharness`]).
//!
//! Real scanner data is replaced by a deterministic multi-coil brain
//! phantom ([`phantom`]) so the whole pipeline runs at desk scale.

pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cvae;
pub mod error;
pub mod evalharness;
pub mod field;
pub mod flowmatch;
pub mod ingest;
pub mod label;
pub mod metrics;
pub mod nn;
pub mod patching;
pub mod phantom;
pub mod plot;
pub mod rng;

pub use error::{Error, Result};
pub use field::ComplexField;
pub use label::{Abnormality, ConditionLabel, PathToken, SeqToken, Sequence, VolumeClass};
