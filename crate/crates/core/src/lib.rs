//! Memory-bank compression for continual adaptation of toy language models.
//!
//! A document stream is encoded into fixed-size latent matrices, quantized
//! against a learned codebook with online dead-code resetting, and stored
//! as integer code rows. Queries are answered by cross-attention
//! aggregation over the materialized bank, which modulates a frozen
//! decoder through key/value prefixes plus low-rank adapters. Adaptation
//! is gradient-free: memorization and answering are forward passes only.

pub mod adaptation;
pub mod aggregator;
mod bytes;
pub mod codebook;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod membank;
pub mod model;
pub mod training;
pub mod nn;
pub mod num;

pub use error::{MbcError, Result};
