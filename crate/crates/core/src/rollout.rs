//! The interleaved reason/retrieve loop shared by data generation and
//! evaluation.

use tracing::debug;

use crate::error::{Error, Result};
use crate::format::{parse_into_step, PromptBundle};
use crate::gateway::{CompletionRequest, GenerationParams, LanguageModel};
use crate::model::{Status, StepKind, Trajectory};
use crate::retrieval::{truncate, Retriever};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub top_k: usize,
    /// Character cap applied to retrieved documents, if any.
    pub truncate_chars: Option<usize>,
    pub params: GenerationParams,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            truncate_chars: None,
            params: GenerationParams::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::validation("top_k must be positive"));
        }
        if self.truncate_chars == Some(0) {
            return Err(Error::validation("truncate_chars must be positive"));
        }
        self.params.validate()
    }
}

/// Rough token count used when an endpoint reports no usage.
pub fn estimate_tokens(prompt: &str, output: &str) -> u64 {
    ((prompt.chars().count() + output.chars().count()) as u64).div_ceil(4)
}

/// Drive `trajectory` until it answers, breaks format, or hits its cap.
/// Model or retriever failures abort the trajectory instead of erroring;
/// the returned error is reserved for misuse (non-open input, bad config).
pub fn rollout<M, R>(
    mut trajectory: Trajectory,
    model: &M,
    retriever: &R,
    prompts: &PromptBundle,
    config: &RolloutConfig,
) -> Result<Trajectory>
where
    M: LanguageModel + ?Sized,
    R: Retriever + ?Sized,
{
    if trajectory.status != Status::Open {
        return Err(Error::usage(format!(
            "trajectory {} is {}, expected open",
            trajectory.id,
            trajectory.status.as_str()
        )));
    }
    if trajectory.max_iterations == 0 {
        return Err(Error::usage("max_iterations must be at least 1"));
    }
    config.validate()?;

    while trajectory.status == Status::Open {
        let turn = trajectory.steps.len() + 1;
        let prompt = prompts.render_turn_prompt(&trajectory.question, &trajectory.steps)?;
        let request = CompletionRequest {
            prompt,
            question: trajectory.question.clone(),
            turn,
            params: config.params.clone(),
        };
        trajectory.usage.model_calls += 1;
        let completion = match model.complete(&request) {
            Ok(c) => c,
            Err(e) => {
                trajectory.abort(format!("model call failed at turn {turn}: {e}"));
                break;
            }
        };
        match completion.usage_tokens {
            Some(t) => trajectory.usage.tokens += t,
            None => {
                trajectory.usage.tokens += estimate_tokens(&request.prompt, &completion.text);
                trajectory.usage.tokens_estimated = true;
            }
        }

        let mut step = parse_into_step(&completion.text);
        if step.kind == StepKind::Query {
            let query = step.query.clone().unwrap_or_default();
            let docs = match retriever.retrieve(&query, config.top_k) {
                Ok(docs) => docs,
                Err(e) => {
                    trajectory.abort(format!("retrieval failed at turn {turn}: {e}"));
                    break;
                }
            };
            step.documents = docs
                .into_iter()
                .take(config.top_k)
                .map(|d| match config.truncate_chars {
                    Some(cap) => truncate(&d, cap),
                    None => d,
                })
                .collect();
        }
        debug!(id = %trajectory.id, turn, kind = ?step.kind, "step");
        trajectory.append_step(step)?;
    }
    Ok(trajectory)
}
