//! Iterative reasoning-and-retrieval pipeline: trajectories, prompt formats,
//! BM25 and remote retrieval, model gateways, rewards, policy-gradient
//! numerics and QA evaluation.

pub mod audit;
pub mod coldstart;
pub mod error;
pub mod eval;
pub mod format;
pub mod gateway;
pub mod http;
pub mod model;
pub mod policy;
pub mod retrieval;
pub mod reward;
pub mod rollout;
pub mod text;

pub use error::{Error, Result};
pub use format::{FormatViolation, PromptBundle};
pub use gateway::{Completion, CompletionRequest, GenerationParams, LanguageModel};
pub use model::{Document, QaItem, Status, Step, StepKind, Trajectory};
pub use retrieval::{Bm25Params, Corpus, Retriever};
