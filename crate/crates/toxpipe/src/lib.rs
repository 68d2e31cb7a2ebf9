//! Desk-scale toolkit for binary hate-speech classification: dataset
//! adapters, deterministic text preprocessing, four classifier
//! architectures over a small reverse-mode autodiff core, transfer-learning
//! scenarios with layer freezing, and classification metrics.

pub mod cli;
pub mod corpus;
pub mod metrics;
pub mod models;
pub mod preprocess;
pub mod tensor;
pub mod training;
pub mod util;
pub mod vocab;
