//! Exact preference-optimization objectives over enumerable tabular policies.
//!
//! This crate implements the SimPER perplexity-based alignment loss together
//! with the standard offline preference objectives (SFT, DPO, IPO, SimPO,
//! KTO, CPO, SLiC), their closed-form partial derivatives, tabular
//! autoregressive policies with exact enumeration, a synthetic Bradley-Terry
//! preference-data generator, deterministic training, and the diagnostic
//! instruments used to study gradient balance and divergence behavior.
//!
//! The crate is `no_std`-compatible (with `alloc`); disable the default
//! `std` feature to build it that way. File formats, persistence, and the
//! command-line front end live in the companion `prefopt-cli` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod datagen;
pub mod diagnostics;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod policy;
pub mod rng;
pub mod seq;
pub mod trainer;

pub use losses::{LossConfig, LossResult, Method, PairInputs};
pub use policy::{EnumeratedDistribution, PolicyGradient, TabularPolicy};
pub use seq::{make_stats, PreferenceExample, SequenceStats, TokenSequence};
