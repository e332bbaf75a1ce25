pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod llm;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod trainer;
pub mod triplet;
