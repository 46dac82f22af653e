//! Decentralized multi-source unsupervised domain adaptation.
//!
//! K labeled source silos train local copies of a shared classifier and upload
//! only serialized parameters. The target node turns the uploaded teachers into
//! an extra pseudo-labelled domain through a confidence-gated class vote,
//! weights every domain by its leave-one-out contribution to consensus quality,
//! aggregates the models and aligns BatchNorm moments with the weighted source
//! moments.
//!
//! Module map:
//!
//! * [`nn`]: matrix type, MLP classifier with manual backprop, losses, SGD,
//!   parameter aggregation and the model wire format.
//! * [`synth`]: seeded Gaussian-blob domains with rotation/translation shift,
//!   label corruption and irrelevant domains.
//! * [`vote`]: the three-step knowledge vote producing consensus items.
//! * [`focus`]: consensus quality, consensus-focus values and domain weights.
//! * [`bn_mmd`]: BatchNorm moment extraction, quadratic-kernel MMD, its
//!   mini-batch loss and its closed-form optimum.
//! * [`federation`]: the per-epoch training protocol with communication rounds.
//! * [`harness`]: experiment configuration, scenarios, CSV metrics, ablations
//!   and diagnostics.

pub mod bn_mmd;
pub mod error;
pub mod federation;
pub mod focus;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod vote;

pub use error::{Error, Result};
