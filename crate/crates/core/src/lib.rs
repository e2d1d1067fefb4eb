//! Controlled overhypothesis experiments on tiny autoregressive transformers.
//!
//! The crate covers the whole pipeline: synthetic corpora ([`corpusgen`]),
//! a byte-pair tokenizer ([`tokenizer`]), a from-scratch transformer
//! ([`lm`]), the wug-test battery ([`battery`]) and its scoring ([`eval`]),
//! a hierarchical Bayesian ideal observer ([`hbm`]), probing and
//! representation analyses ([`probelab`]), statistical tests ([`stats`]) and
//! run orchestration ([`pipeline`]).

pub mod battery;
pub mod corpusgen;
pub mod error;
pub mod eval;
pub mod hbm;
pub mod lm;
pub mod pipeline;
pub mod probelab;
pub mod stats;
pub mod tokenizer;

pub use error::{Error, Result};
