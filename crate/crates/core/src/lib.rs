//! Single-pass universal style transfer.
//!
//! A frozen VGG-19 encoder ([`codec`]) feeds a trainable decoder ([`arch`]) that
//! carries parameter-free transfer modules ([`transfer`]) at the bottleneck, inside
//! the decoder and on instance-normalized skip connections. [`train`] fits the
//! decoder as a plain auto-encoder and [`eval`] holds the quality metrics and the
//! latency benchmark.

pub mod arch;
pub mod checkpoint;
pub mod codec;
pub mod eval;
pub mod error;
pub mod image;
pub mod nn;
pub mod tensor;
pub mod toyset;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
