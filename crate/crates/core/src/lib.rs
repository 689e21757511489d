//! Well-log foundation model pipeline.
//!
//! Stages: synthetic/CSV corpus ingestion ([`corpus`]), vector-quantized
//! tokenization ([`tokenizer`]), masked-token + contrastive pretraining
//! ([`pretrain`]), multi-task adaptation heads ([`finetune`]), the scored
//! asynchronous patch loader ([`loader`]) and evaluation ([`eval`]).
//! [`config`], [`checkpoint`] and [`pipeline`] wire the stages together
//! for the `wlfm` command-line tool.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod finetune;
pub mod graph;
pub mod loader;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod tokenizer;
