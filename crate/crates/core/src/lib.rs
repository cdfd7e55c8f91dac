//! instar: template-driven Lean instantiation pipeline.
//!
//! Given a natural-language optimization problem, a formalized abstract
//! template and an in-class worked example, the pipeline generates a whole
//! Lean file, repairs it against checker feedback, fills proofs, renders a
//! harmless final artifact and scores the result. All model and checker
//! interactions sit behind pluggable, replayable backends.

pub mod config;
pub mod driver;
pub mod evaluator;
pub mod fixer;
pub mod pipeline;
pub mod gateway;
pub mod kb;
pub mod lexer;
pub mod postprocess;
pub mod repair;
pub mod skeleton;
pub mod templates;

pub use driver::{CheckReport, Checker, MockChecker, RealChecker, SourceChecker};
pub use gateway::{Gateway, GenParams, PromptLibrary, Transcript};
