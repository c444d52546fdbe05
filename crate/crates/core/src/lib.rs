//! Desk-scale RNN-transducer toolkit: lattice losses with exact gradients,
//! a minimal LSTM network core, wordpiece units, streaming decoders, and
//! the pretrain/transfer/finetune pipeline.

pub mod ctc;
pub mod decode;
pub mod error;
pub mod lattice;
pub mod lm;
pub mod math;
pub mod nnet;
pub mod pipeline;
pub mod units;
pub mod wordpiece;

pub use error::{Error, Result};
