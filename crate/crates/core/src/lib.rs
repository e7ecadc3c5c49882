//! Tabular Q-learning analyzed as a switched affine system.
//!
//! [`mdp`] holds models and `Q*`, [`sampler`] the learner, [`switching`] the
//! coupled comparison systems, [`bounds`] rates and finite-time bounds,
//! [`harness`] ensembles and verification, [`io`] file formats.

pub mod error;
pub mod mdp;
pub mod sampler;
pub mod switching;
pub mod bounds;
pub mod harness;
pub mod io;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/qlearning.md")]
    mod qlearning {}
    #[doc = include_str!("../../../book/src/switching.md")]
    mod switching {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
