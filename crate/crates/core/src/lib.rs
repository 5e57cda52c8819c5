//! Mask-CTC style non-autoregressive sequence recognition.
//!
//! CTC greedy decoding produces a first hypothesis; a bidirectional
//! masked-token decoder then re-predicts its low-confidence tokens. A length
//! head trained on deletion- and insertion-simulated masks lets the
//! shrink-and-expand decoder change the hypothesis length while refining.
//!
//! Everything runs on the small `f64` autodiff core in [`numerics`].

pub mod config;
pub mod ctc;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ctc.md")]
    mod ctc {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/synthdata.md")]
    mod synthdata {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
