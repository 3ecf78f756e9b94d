//! Physiological feature extraction, statistical analysis and cross-attention
//! fusion for detecting sexism in memes from viewers' EEG, eye-tracking and
//! heart-rate responses.

pub mod analysis;
pub mod autodiff;
pub mod behavior;
pub mod eeg;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod harmonize;
pub mod io;
pub mod rng;
pub mod stats;
pub mod types;
