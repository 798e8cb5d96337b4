//! Multi-label image segmentation with a dynamic multiscale tree of classifiers.
//!
//! The crate trains binary trees whose nodes nest either a structured random
//! forest ([`srf`]) operating on regular patches or a Bayesian network ([`bn`])
//! operating on SLIC superpixels ([`slic`]). Probability maps flow down and up
//! the tree edges so each node refines its output with the context produced by
//! its neighbours ([`dmt`]). Leaf maps are combined by majority voting.
//!
//! Supporting modules: raster types and the `.mdi` file format ([`grid`]),
//! statistical patch/superpixel features ([`features`]), Dice scoring and
//! leave-one-out cross-validation ([`eval`]), and a deterministic phantom
//! generator ([`synth`]).

pub mod bn;
pub mod dmt;
pub mod error;
pub mod eval;
pub mod features;
pub mod grid;
pub mod seed;
pub mod slic;
pub mod srf;
pub mod synth;

pub(crate) mod blobio;

pub use error::{Error, Result};
