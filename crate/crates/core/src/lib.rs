//! Heart-rate based classification toolkit.
//!
//! * [`ecg`] ingests and synthesises single-channel ECG.
//! * [`qrs`] extracts R peaks with an enhanced Pan-Tompkins detector.
//! * [`rr`] corrects artefactual RR intervals.
//! * [`hr`] turns corrected RR series into normalised 4 Hz windows.
//! * [`nn`] is a small reverse-mode differentiation core with the layers,
//!   optimiser and schedule the model needs.
//! * [`model`] assembles the Conformer classifier and its ablations.
//! * [`train`] runs training, inference, epoch aggregation and metrics.
//! * [`attn`] analyses attention maps (rollout, distance, entropy).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod attn;
pub mod ecg;
pub mod error;
pub mod hr;
pub mod model;
pub mod nn;
pub mod qrs;
pub mod rr;
pub mod train;

pub use error::{Error, Result};
