//! A desk-scale laboratory for unsupervised neural machine translation.
//!
//! The crate generates paired synthetic languages that differ only in word
//! order (SVO source, SOV target), pre-trains a small encoder-decoder with
//! either a masked-span (MASS) or a denoising (DAE) objective on static
//! cross-lingual embeddings, fine-tunes it with iterative back-translation,
//! and measures how much re-ordering the source side helps each objective.
//!
//! Pipeline order: [`synthlang`] → [`corpus`] → [`xembed`] → [`noise`] +
//! [`model`] → [`trainer`] → [`eval`], orchestrated by [`pipeline`].

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod plot;
pub mod seed;
pub mod synthlang;
pub mod trainer;
pub mod xembed;

pub use error::{Error, Result};
