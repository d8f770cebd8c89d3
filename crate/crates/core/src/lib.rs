//! Multi-user semantic communication over a multiple access channel (MAC).
//!
//! The library models an uplink in which `K` user terminals transmit English
//! text simultaneously on the same spectrum.  Each terminal runs a trainable
//! semantic encoder (word embedding, Transformer encoder, autoencoder
//! compressor) that converts text into complex channel symbols; the base
//! station recovers all texts by successive interference cancellation (SIC)
//! carried out on compressed word-semantic vectors rather than digital
//! symbols, optionally fusing already-decoded users' features as side
//! information.
//!
//! Modules:
//!
//! * [`corpus`] — dictionaries, tokenization, batching of sentence pairs.
//! * [`nn`] — the tape-based reverse-mode autodiff engine and layers.
//! * [`codec`] — per-user encoder/decoder stacks and symbol framing.
//! * [`channel`] — the K-user MAC with AWGN or Rayleigh fading.
//! * [`sic`] — semantic SIC, side-information fusion, two-phase decoding.
//! * [`training`] — losses, pretraining, joint training, full/partial retraining.
//! * [`metrics`] — sentence similarity and BLEU scoring.
//! * [`baseline`] — Huffman + 64-QAM classical transmission chain.
//! * [`checkpoint`] — bit-exact parameter archives.

pub mod baseline;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod corpus;
mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod sic;
pub mod training;

pub use error::{Error, Result};
