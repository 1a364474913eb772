//! Core of the arithmetic extrapolation lab: symbol vocabularies, task
//! generators, a small autodiff tensor engine, the MLP / GRU seq2seq /
//! Transformer models, Adam training, exact-match evaluation with error
//! taxonomy, and classification of language-model probe responses.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. File formats, the HTTP client and the command line live in the
//! `addlab` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod decimal;
pub mod eval;
pub mod models;
pub mod probe;
pub mod rng;
pub mod tensor;

pub use rng::Rng;
pub mod taskgen;
pub mod train;
pub mod vocab;
