//! Realistic noise for multilingual NLP test sets.
//!
//! The pipeline mines word edits from revision histories ([`corpus`]),
//! turns them into weighted error dictionaries ([`noisedict`]), injects them
//! into labeled data ([`datasets`], [`inject`]) and scores model predictions
//! on clean and noisy copies ([`metrics`]). [`contrastive`] holds the robust
//! contrastive pretraining loss with analytic gradients.

pub mod contrastive;
pub mod corpus;
pub mod datasets;
pub mod error;
pub mod inject;
pub mod lang;
pub mod metrics;
pub mod noisedict;
pub mod tsv;

pub use error::{Error, Result};
pub use lang::Lang;
