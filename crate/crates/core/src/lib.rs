//! Tool environment, chain-of-thought protocol, model backends and grading
//! for evaluating autonomous clinical LLM agents on curated patient cases.

pub mod backends;
pub mod case_model;
pub mod evaluation;
pub mod protocol;
pub mod tools;

pub use backends::{Backend, BackendConfig, BackendError, HttpBackend, OracleBackend, ScriptedBackend};
pub use case_model::{CaseError, CaseFile, Corpus, Difficulty, InvestigationMenu};
pub use protocol::{run_case, AgentStep, CaseRunner, RunConfig, RunRecord, Termination, Transcript};
pub use tools::{dispatch, register_tools, ToolCall, ToolKind, ToolResponse, ToolState};
