//! Retrieve, rerank and generate pipeline for document-grounded dialogue.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod fgm;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reranker;
pub mod retriever;
pub mod schedule;
pub mod tokenizer;
pub mod train;
pub mod xaug;
