//! Manifests, run configuration, synthetic corpora and the file-level pipeline.

pub mod config;
pub mod manifest;
pub mod synth;
pub mod pipeline;
