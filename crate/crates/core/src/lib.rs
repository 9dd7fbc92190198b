//! Few-shot figure question answering: corpus handling, retrieval of
//! demonstrations, prompting, cached inference, scoring and ensembling.

pub mod configsearch;
pub mod corpus;
pub mod embeddings;
pub mod ensemble;
pub mod inference;
pub mod metrics;
pub mod prompting;
pub mod retrieval;
pub mod cli;
