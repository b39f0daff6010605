//! Higher-order attention network for joint intent detection and slot filling.
//!
//! A shared BiLSTM with label attention produces intent- and slot-aware token
//! features. Stacked bilinear attention layers exchange information between
//! the two streams, a gated fusion layer merges them, and a max-pooled
//! classifier plus a linear-chain CRF decode the intent and slot labels.

#![allow(clippy::needless_range_loop)]

pub mod bilinear;
pub mod corpus;
pub mod decoder;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;

pub use bilinear::{BlockParams, BlockTrace, ChannelMode, PoolingActivation};
pub use corpus::{Dataset, EvalReport, Utterance};
pub use embedder::Vocab;
pub use error::{Error, Result};
pub use harness::Config;
pub use model::{HanModel, ModelConfig};
pub use numerics::{Activation, Graph, Matrix, NodeId, ParamStore};
