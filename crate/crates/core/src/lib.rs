//! Dual-encoder ensemble question answering built from scratch.
//!
//! Two small transformer encoders are combined either through a
//! convolutional two-weight gate feeding a UniLM-style generator (factoid
//! questions) or through an attention-over-attention reader plus an MLP
//! scoring head (cloze questions). Everything learnable runs on the
//! reverse-mode tape in [`autodiff`].

pub mod aoa;
pub mod autodiff;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod pretrain;
pub mod reader;
pub mod tokenizer;
pub mod training;
pub mod unilm;

pub use error::{Error, Result};

// The guide's chapters run as doctests so their snippets stay in sync.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    struct Tokenizer;
    #[doc = include_str!("../../../book/src/encoder.md")]
    struct Encoder;
    #[doc = include_str!("../../../book/src/generation.md")]
    struct Generation;
    #[doc = include_str!("../../../book/src/fusion.md")]
    struct Fusion;
    #[doc = include_str!("../../../book/src/reader.md")]
    struct Reader;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/datasets.md")]
    struct Datasets;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
