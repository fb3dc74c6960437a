// Index loops mirror the componentwise formulas; `!(x > 0.0)` also rejects NaN.
#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

pub mod bsvie;
pub mod coefficients;
pub mod control;
pub mod duality;
pub mod error;
pub mod fsvie;
pub mod kernel;
pub mod lattice;

pub use error::{Error, Result};

/// The guide in `book/src`, compiled so its snippets run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tree.md")]
    pub mod tree {}
    #[doc = include_str!("../../../book/src/forward.md")]
    pub mod forward {}
    #[doc = include_str!("../../../book/src/backward.md")]
    pub mod backward {}
    #[doc = include_str!("../../../book/src/duality.md")]
    pub mod duality {}
    #[doc = include_str!("../../../book/src/control.md")]
    pub mod control {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
