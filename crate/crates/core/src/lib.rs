//! Lie-group convolutional sentence classification.
//!
//! The crate is organized around six subsystems:
//!
//! - [`ndtensor`]: a minimal dense-tensor core with a reverse-mode gradient
//!   tape and the Adadelta / SGD-momentum optimizers.
//! - [`liegroup`]: Lie group elements, exp/log maps, position lifting, and
//!   Haar-weighted neighborhood quadrature for T(1), T(2), and SO(2).
//! - [`lieconv`]: the Lie convolution layer — an MLP-parameterized dynamic
//!   kernel evaluated on Lie-algebra coordinates, applied over word windows,
//!   with max-over-time pooling.
//! - [`models`]: the five classifier architectures (linear baseline, SCNN,
//!   SCLie, DPCNN, DPCLie) plus binary checkpoints.
//! - [`corpus`]: dataset ingestion, tokenization, vocabulary construction,
//!   word2vec binary loading, split policies, and sentence-pair sets for the
//!   symmetry probe.
//! - [`harness`]: training loops, evaluation, correlation statistics, the
//!   parameter-count control experiment, and representation export.
//!
//! All randomness flows from one master seed through named sub-streams
//! ([`rng::stream`]), and every training-facing number is reproducible
//! bit-for-bit given the same configuration and seed.

pub mod corpus;
pub mod fixtures;
pub mod harness;
pub mod lieconv;
pub mod liegroup;
pub mod models;
pub mod ndtensor;
pub mod real;
pub mod rng;

pub use real::Real;
