//! Single-object tracking in lidar point clouds with a Siamese network:
//! pillar encoding, a hierarchical transformer backbone, multi-scale
//! cross-attention between template and search, and a two-stage
//! set-prediction decoder. See the book under `book/` for a walkthrough.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod decoder;
pub mod geometry;
pub mod mae;
pub mod model;
pub mod nn;
pub mod pillars;
pub mod run;
pub mod seqio;
pub mod synthdata;
pub mod tensor;
pub mod tracker;
pub mod training;

// The book's snippets run as doctests, one module per chapter so a failure
// points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/pillars.md")]
    mod pillars {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/synthdata.md")]
    mod synthdata {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
