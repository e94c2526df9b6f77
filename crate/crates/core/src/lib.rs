//! Zero-shot clinical trial patient matching.
//!
//! The pipeline retrieves relevant note chunks, renders prompts under one of
//! four strategies, obtains structured assessments from a pluggable backend,
//! aggregates per-note decisions into patient-level eligibility, and scores
//! the result while accounting for every token and API call.

pub mod aggregation;
pub mod assessment;
pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod pipeline;
pub mod prompting;
pub mod retry;
pub mod tokenize;
