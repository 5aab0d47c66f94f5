//! Few-shot Siamese similarity learning for canopy tiles, with case-based
//! explanations and metrics for how good those explanations are.

pub mod augment;
pub mod classify;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod fewshot;
pub mod nn;
pub mod pairs;
pub mod seed;
pub mod siamese;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};

/// The guide's code listings, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/pairs.md")]
    mod pairs {}
    #[doc = include_str!("../../../book/src/siamese.md")]
    mod siamese {}
    #[doc = include_str!("../../../book/src/fewshot.md")]
    mod fewshot {}
    #[doc = include_str!("../../../book/src/classification.md")]
    mod classification {}
    #[doc = include_str!("../../../book/src/explanations.md")]
    mod explanations {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
