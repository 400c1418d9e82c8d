pub mod ambiguity;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod harness;
mod layers;
mod linalg;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};

/// The guide's code blocks, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/ambiguity.md")]
    mod ambiguity {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
