//! Multi-modal contrastive pretraining with masked image reconstruction.
//!
//! The crate bundles a synthetic multi-modal patient corpus, a report
//! keyword pipeline, a small shared-encoder transformer model, the joint
//! image-text / image-image / reconstruction objective, the pretraining and
//! fine-tuning loops, and the downstream evaluation protocols.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod text;
pub mod training;

pub use error::{Error, Result};

/// Chapters of the guide in `book/`, compiled here so their snippets run as
/// doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    pub mod corpus {}
    #[doc = include_str!("../../../book/src/text.md")]
    pub mod text {}
    #[doc = include_str!("../../../book/src/objective.md")]
    pub mod objective {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
