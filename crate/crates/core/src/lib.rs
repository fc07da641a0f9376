//! Core of stagehand: the configuration language, the infrastructure engine
//! and its providers, source control access, and the pipeline engine.

pub mod canonical;
pub mod dsl;
pub mod httpd;
pub mod iac;
pub mod pipeline;
pub mod process;
pub mod providers;
pub mod scm;

pub use dsl::{Document, Value};
