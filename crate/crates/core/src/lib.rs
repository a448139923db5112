//! Dual-encoder nutrient estimation from product images and ingredient
//! statements.
//!
//! The crate is `no_std` (with `alloc`) and carries every algorithmic piece of
//! the pipeline: dense tensors with a reverse-mode tape, transformer encoders
//! for image patches and ingredient tokens, the contrastive objective, the
//! per-nutrient MLP heads, nutrient discretization, training, the
//! one-vs-one AUC evaluation, GradCAM / token saliency and the chemistry
//! closed forms. File formats, image decoding and the command line live in the
//! `nutricast` companion crate.
#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` guards deliberately reject NaN along with the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod chem;
pub mod classifier;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod interpret;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ParamGroup, ParamId, ParamStore, Parameter, Tensor};
