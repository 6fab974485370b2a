//! Procedure-aware action quality assessment.
//!
//! The model segments a query into steps, cross-attends each query step to
//! the matching exemplar step and regresses the score difference to the
//! exemplar. Everything runs on [`tsa_diffcore`] in `f64`.

pub mod attention;
pub mod checks;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod lexicon;
pub mod model;
mod nn;
pub mod regression;
pub mod segmentation;

pub use error::CoreError;
