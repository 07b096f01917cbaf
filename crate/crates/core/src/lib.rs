//! Autoregressive transformer over tokenized daily stock returns.
//!
//! The pipeline: returns are discretized into a 402-token dictionary
//! ([`tokenizer`]), a small decoder-only transformer ([`model`]) is trained on
//! per-stock token windows ([`train`]), its next-token distributions become
//! expected-return forecasts ([`forecast`]), and those are evaluated with
//! decile long-short portfolios ([`backtest`]) and cross-sectional /
//! time-series regressions ([`econometrics`]).
//!
//! Differentiation is handled by the small tape in [`autograd`]; no external
//! ML framework is involved.

pub mod autograd;
pub mod backtest;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod econometrics;
pub mod error;
pub mod forecast;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub use tokenizer::{BinSpec, TokenId};
