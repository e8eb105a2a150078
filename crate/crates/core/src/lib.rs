//! Language modelling for low-resource gloss corpora.
//!
//! The crate covers the whole pipeline: ELAN tier exports are normalised
//! into gloss sentences ([`corpus`]), feed-forward and stacked-LSTM models
//! are built on a small reverse-mode differentiation engine ([`autodiff`],
//! [`models`]), trained with SGD and transferred between corpora by
//! fine-tuning or output-layer substitution ([`trainer`]), and scored by
//! perplexity against count-based baselines ([`eval`], [`ngram`]).

pub mod autodiff;
pub mod cli;
pub mod corpus;
mod error;
pub mod eval;
pub mod models;
pub mod ngram;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

/// The guide's chapters, compiled so that their code blocks run as
/// doc-tests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    pub mod corpus {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    pub mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    pub mod transfer {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub mod reproducibility {}
}
