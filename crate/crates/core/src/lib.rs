//! Traversability rating of water hazards with vision-language models.
//!
//! The crate covers the offline pipeline: dataset manifest and annotation
//! store, agreement statistics, instance crops, prompt rendering, model
//! gateway, response parsing, evaluation and cost-map export.

pub mod costmap;
pub mod dataset;
pub mod eval;
pub mod extract;
pub mod gateway;
pub mod mask;
pub mod parser;
pub mod prompt;
pub mod rating;
pub mod run;
pub mod synthetic;

pub use rating::TraversabilityRating;
