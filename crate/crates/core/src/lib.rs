pub mod config;
pub mod corpus;
pub mod evalharness;
pub mod ftemit;
pub mod llmgate;
pub mod manifest;
pub mod pipeline;
pub mod qagen;
pub mod templates;
pub mod tkg;
pub mod triples;
pub mod util;
