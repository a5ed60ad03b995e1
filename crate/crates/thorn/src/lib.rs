//! Human-object-interaction action recognition at desk scale.
//!
//! An action is a (verb, noun) pair. The model encodes an RGB clip with a
//! small 3-D convolutional backbone, filters the mixed scene feature into one
//! representation per object class, reasons over inter-object relations with
//! a stack of attention-superimposed graph blocks, and predicts nouns from
//! the refined node features and verbs from the learned adjacency matrix.
//! Everything trains jointly against a verb loss, a noun loss, and a
//! per-frame object-presence loss.
//!
//! The crate ships:
//! - the model itself ([`encoder`], [`orf`], [`orr`], [`heads`], [`model`]),
//!   built on a deterministic f64 autodiff tape ([`autodiff`]);
//! - a synthetic moving-shapes clip generator with exact ground truth
//!   ([`synthdata`]);
//! - a training/evaluation/ablation harness ([`harness`]) with checkpointing
//!   ([`checkpoint`]), Adam + plateau scheduling ([`optim`]), and metric
//!   reports ([`metrics`]);
//! - class-activation-map and adjacency exports for qualitative inspection.
//!
//! See the `examples/` directory for one runnable entry point per capability,
//! and the `thorn` binary for the same operations behind a CLI.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod model;
pub mod nn;
pub mod orf;
pub mod orr;
pub mod synthdata;

pub use error::{Result, ThornError};
