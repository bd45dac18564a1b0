//! Desk-scale Branch-Train-MiX laboratory.
//!
//! Script-specialized dense transformers are branch-trained from a shared
//! base, merged into a top-k mixture-of-experts model by checkpoint surgery,
//! then fine-tuned, aligned and evaluated on synthetic dual-script
//! (Arabic-script / Arabizi) corpora.

pub mod tensor;
pub mod data;
pub mod model;
pub mod moe;
pub mod tokenizer;
pub mod train;
pub mod merge;
pub mod eval;
pub mod pipeline;
