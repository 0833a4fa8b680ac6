//! Quality scoring and top-percentile selection for image-text instruction
//! tuning corpora.
//!
//! The pipeline rates every entry of a line-delimited manifest with external
//! judge endpoints (image quality, text quality, task prediction, captioning,
//! multimodal alignment), folds the sub-metric ratings into one composite
//! score per entry, and exports the top-ranked fraction as a new manifest.

pub mod cli;
pub mod corpus;
pub mod judge;
pub mod pipeline;
pub mod rating;
pub mod report;
pub mod scoring;
pub mod selection;
pub mod taxonomy;
