//! Joint digital, pattern and position precoding for multiuser MIMO-OFDM
//! with movable, pattern-reconfigurable antennas, plus the parametric
//! channel estimator that feeds it.
//!
//! The guide under `book/` walks through the pieces; its code blocks run as
//! doctests of the `guide` module.

pub mod channel;
pub mod em_basis;
pub mod estimation;
pub mod harness;
pub mod error;
pub mod linalg;
pub mod opt;
pub mod scenario;
pub mod precoder;
pub mod zf;
pub mod wmmse;

/// Chapters of the mdbook guide, compiled here so their examples run with
/// `cargo test --doc`.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub mod intro {}
    #[doc = include_str!("../../../book/src/channel.md")]
    pub mod channel {}
    #[doc = include_str!("../../../book/src/patterns.md")]
    pub mod patterns {}
    #[doc = include_str!("../../../book/src/precoding.md")]
    pub mod precoding {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    pub mod estimation {}
    #[doc = include_str!("../../../book/src/harness.md")]
    pub mod harness {}
}
