//! Spectral dynamics of the restricted Euler-Poisson system: classification of
//! initial data, integration in several coordinate systems, blow-up detection
//! and asymptotic rate analysis.

// `!(x > 0.0)` and friends are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod integrate;
pub mod model;
pub mod oracle;

pub use error::{Error, Result};
pub use model::{
    classify, validate, CaseLabel, Classification, Group, RepParams, Rule, SpectralInitialData,
    Verdict,
};
