//! Skill distillation and gated refinement for black-box language models.
//!
//! A student model's failures on a labeled QA corpus are annotated, clustered
//! and turned into Markdown skill files by a teacher model. The library is
//! then refined through a coverage phase and a safety phase, and the student
//! is evaluated with selected skills injected into its prompt.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod library;
pub mod model;
pub mod refinement;
pub mod selector;
pub mod warmup;
