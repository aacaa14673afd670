//! Synthetic models, evaluation metrics and end-to-end pipelines.

pub mod correlation;
pub mod metrics;
pub mod models;
pub mod pipelines;
pub mod simplex;
