//! Ranking of speech-enhancement systems by pairwise comparison of
//! homologous outputs.
//!
//! The pipeline has two halves:
//!
//! - an utterance-level pairwise comparator ([`model`]) that reads the
//!   log-mel features of two enhanced clips of the same noisy input,
//!   stacked as channels, and predicts a comparative score in `[0, 1]`
//!   together with a MOS estimate for each clip;
//! - a system-level Enumerating-Comparing-Scoring ranker ([`ranking`]) that
//!   visits every pair of systems, compares their outputs utterance by
//!   utterance through any [`comparators::Comparator`], and accumulates
//!   points under binary or non-binary scoring.
//!
//! [`metrics`] scores a ranking against reference mean MOS with LCC, SRCC
//! and KRCC; [`audio`] provides WAV I/O and a synthetic corpus with a known
//! quality order so every claim can be tested without challenge data.

pub mod audio;
pub mod comparators;
pub mod error;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod model;
pub mod pairs;
pub mod ranking;
pub mod seed;
pub mod sqa;

pub use error::{Error, Result};
