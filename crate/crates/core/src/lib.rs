//! Schrödinger-bridge regression toolkit: noise schedules, bridge posteriors,
//! a time-conditioned residual regressor, training, and samplers.

pub mod analysis;
pub mod bridge;
pub mod check;
pub mod csv;
pub mod error;
pub mod net;
pub mod problems;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/bridge.md")]
    mod bridge {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
