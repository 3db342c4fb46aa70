//! Prompt optimization for binary passage classification with LLMs.
//!
//! * [`corpus`]: labeled passages, report-level splits, class statistics.
//! * [`gateway`]: chat completion and embedding backends behind one cache.
//! * [`prompting`]: message assembly, label parsing, bundled instructions.
//! * [`selection`]: few-shot demonstration selection.
//! * [`evaluation`]: repeated-run classification metrics.
//! * [`tuner`]: greedy reflection-driven instruction rewriting.
//! * [`matrix`]: the instruction × demonstration-strategy experiment grid.

pub mod corpus;
pub mod evaluation;
pub mod exec;
pub mod gateway;
pub mod matrix;
pub mod prompting;
pub mod selection;
pub mod tuner;

pub use exec::Execution;
