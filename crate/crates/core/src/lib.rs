//! Multi-task incomplete utterance rewriting.
//!
//! A dialogue's context utterances and its incomplete last turn are encoded
//! jointly; a token-pair edit grid (NONE / INSERT / REPLACE) is predicted over
//! context x incomplete tokens and applied to produce the rewrite. Auxiliary
//! heads select relevant context utterances, match them against the rewrite
//! and check intention consistency.
//!
//! The crate is `no_std` + `alloc`; file formats and the command line live in
//! `iur-cli`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod rewriter;
pub mod supervision;
pub mod tensor;
pub mod train;

pub use config::{RunConfig, Switches};
pub use corpus::{Dialogue, Vocab};
pub use error::{Error, Result};
pub use heads::MergeMode;
pub use model::{Model, Prediction, Prepared};
