//! Word-level neural language models whose output layer is extended with
//! `L` history slots (an implicit cache pointer), trained with
//! at-least-one-hot supervision.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: dense tensors, a reverse-mode tape, SGD and gradient checking.
//! * [`corpus`]: vocabulary, token streams, BPTT chunking, frequency buckets.
//! * [`backbone`]: stacked LSTM and decoder-only Transformer hidden-state producers.
//! * [`pointer`]: the extended `V + L` output head, its state and loss.
//! * [`model`] / [`training`]: the full language model, SGD loop and checkpoints.
//! * [`evaluation`]: perplexity, bucket analysis, neural cache adapter, N-best rescoring.
//! * [`selftest`]: gradient and invariant suite used by `cachelm selftest`.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numcore;
pub mod par;
pub mod pointer;
pub mod selftest;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
