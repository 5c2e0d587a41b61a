//! Factorized Kalman recurrent state-space models.
//!
//! ```
//! use rssm::cells::{Model, ModelKind, ModelSpec};
//!
//! let model = Model::new(ModelSpec::new(ModelKind::Rkn, 3, 0), 1).unwrap();
//! assert!(model.params.iter().count() > 0);
//! ```
//!
//! The guide in `book/` walks through each module.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod autodiff;
pub mod cells;
pub mod envs;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod nets;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/beliefs.md")]
    mod beliefs {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
