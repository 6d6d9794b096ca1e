//! Chain-of-Manipulations data toolkit: DSL parsing, manipulation execution,
//! tree search over annotator results, dataset conversion, evaluation and a
//! small KV-memory attention reference.

pub mod annotators;
pub mod attn;
pub mod cli;
pub mod dataset;
pub mod dsl;
pub mod exec;
pub mod metric;
pub mod pipeline;
pub mod tree;
pub mod value;
