//! Open-set RF device authentication from LSTM hidden-state fingerprints.
//!
//! Pipeline: [`synth`] or imported captures → [`preprocess`] (slicing and
//! autocorrelation features) → [`nn`] (CNN+LSTM classifier) →
//! [`fingerprint`] (per-device hidden-state histograms) → [`detector`]
//! (rank-correlation novelty score). [`baselines`] and [`eval`] provide the
//! comparison methods and the cross-validation protocol.

pub mod baselines;
pub mod dataio;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod nn;
pub mod preprocess;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
