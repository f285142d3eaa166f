//! Self-supervised multi-source opinion summarization.
//!
//! The pipeline turns a corpus of product reviews, descriptions, and
//! question-answer pairs into synthetic training quadruplets, trains a
//! multi-encoder summarizer with gated attention fusion (or a single-encoder
//! concatenation baseline), decodes summaries with constrained beam search,
//! and evaluates the results with ROUGE and agreement statistics.
//!
//! Modules roughly follow the data flow:
//!
//! * [`corpus`] — product data model and line-delimited ingestion
//! * [`embed`] — sentence embedding providers and cosine similarity
//! * [`sdc`] — synthetic quadruplet construction
//! * [`model`] — multi-encoder/decoder with fusion gates, plus the concat baseline
//! * [`train`] — teacher-forced training loop with Adam and linear decay
//! * [`generate`] — beam search with a no-repeat n-gram constraint
//! * [`eval`] — ROUGE, paired t-test, best-worst scaling, Fleiss' kappa, harnesses
//! * [`annotate`] — reference-summary annotation prompts and client
//! * [`cli`] — one binary orchestrating the stages

pub mod annotate;
pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod generate;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sdc;
pub mod tokenizer;
pub mod train;
