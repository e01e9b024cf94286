//! Fashion vision-language pre-training at desk scale.
//!
//! The crate implements a three-mode decoder architecture (aligner/captioner,
//! relative captioner, fuser) over a small convolutional image encoder, the
//! four pre-training objectives that train it (cross-modal and hybrid-modal
//! contrastive losses, image and relative caption language modeling), the
//! weakly-supervised pseudo-triplet construction that feeds the triplet
//! objectives, and the seven downstream evaluations.
//!
//! Everything runs on a CPU against a deterministic synthetic catalogue; see
//! the guide in `book/` for a walk-through of each piece.

pub mod corpus;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod triplets;

pub use tensor::{Tape, Tensor, TensorError, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/architecture.md")]
    mod architecture {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/pseudo_triplets.md")]
    mod pseudo_triplets {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
