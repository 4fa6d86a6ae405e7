//! Trajectory data generation, rejection sampling, SFT export and RL batch
//! sampling.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{parse_history, render_history, render_step_output, PromptBundle};
use crate::gateway::{GenerationParams, LanguageModel};
use crate::model::{item_ids, QaItem, Status, Trajectory};
use crate::retrieval::Retriever;
use crate::reward::answer_correctness;
use crate::rollout::{rollout, RolloutConfig};
use crate::text::question_key;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepPolicy {
    RejectIncorrect,
    KeepAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationRun {
    pub max_iterations: usize,
    pub samples_per_question: usize,
    /// Sample `i` uses `temperatures[i % len]`.
    pub temperatures: Vec<f64>,
    pub keep_policy: KeepPolicy,
    pub max_output_tokens: u32,
    /// Sample `i` is generated with seed `seed + i`.
    pub seed: Option<u64>,
    pub top_k: usize,
    pub truncate_chars: Option<usize>,
}

impl Default for GenerationRun {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            samples_per_question: 1,
            temperatures: vec![0.0],
            keep_policy: KeepPolicy::RejectIncorrect,
            max_output_tokens: 1024,
            seed: None,
            top_k: 5,
            truncate_chars: None,
        }
    }
}

impl GenerationRun {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::validation("max_iterations must be at least 1"));
        }
        if self.samples_per_question == 0 {
            return Err(Error::validation("samples_per_question must be at least 1"));
        }
        if self.temperatures.is_empty() {
            return Err(Error::validation("temperatures must be nonempty"));
        }
        self.rollout_config(0).validate()
    }

    pub fn temperature(&self, sample: usize) -> f64 {
        match self.temperatures.len() {
            0 => 0.0,
            n => self.temperatures[sample % n],
        }
    }

    pub fn rollout_config(&self, sample: usize) -> RolloutConfig {
        RolloutConfig {
            top_k: self.top_k,
            truncate_chars: self.truncate_chars,
            params: GenerationParams {
                temperature: self.temperature(sample),
                max_output_tokens: self.max_output_tokens,
                seed: self.seed.map(|s| s.wrapping_add(sample as u64)),
            },
        }
    }
}

/// Run the loop for one (item, sample) pair.
pub fn generate_trajectory<M, R>(
    item: &QaItem,
    id: &str,
    sample: usize,
    model: &M,
    retriever: &R,
    prompts: &PromptBundle,
    run: &GenerationRun,
) -> Result<Trajectory>
where
    M: LanguageModel + ?Sized,
    R: Retriever + ?Sized,
{
    item.validate()?;
    let mut seed = item.start_trajectory(id, run.max_iterations);
    seed.sample_index = sample;
    seed.temperature = Some(run.temperature(sample));
    rollout(seed, model, retriever, prompts, &run.rollout_config(sample))
}

/// Every (item, sample) trajectory, in item-then-sample order.
/// Ids are `<item id>#s<sample>`.
pub fn generate_dataset<M, R>(
    items: &[QaItem],
    model: &M,
    retriever: &R,
    prompts: &PromptBundle,
    run: &GenerationRun,
) -> Result<Vec<Trajectory>>
where
    M: LanguageModel + ?Sized,
    R: Retriever + ?Sized,
{
    run.validate()?;
    let ids = item_ids(items);
    let jobs: Vec<(usize, usize)> = (0..items.len())
        .flat_map(|i| (0..run.samples_per_question).map(move |s| (i, s)))
        .collect();
    jobs.par_iter()
        .map(|&(i, s)| {
            let id = format!("{}#s{s}", ids[i]);
            generate_trajectory(&items[i], &id, s, model, retriever, prompts, run)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// No answer: the cap was hit or the trajectory never finished.
    Incomplete,
    FormatError,
    Incorrect,
}

impl DiscardReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DiscardReason::Incomplete => "incomplete",
            DiscardReason::FormatError => "format_error",
            DiscardReason::Incorrect => "incorrect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discarded {
    pub reason: DiscardReason,
    pub trajectory: Trajectory,
}

/// Partition of a filter input. Every input trajectory lands in exactly one
/// bucket.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Trajectory>,
    pub discarded: Vec<Discarded>,
    /// Judge transport failed; the trajectory must be re-judged.
    pub retry: Vec<Trajectory>,
    /// Generation itself was aborted; neither kept nor discarded.
    pub aborted: Vec<Trajectory>,
}

impl FilterOutcome {
    pub fn histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for d in &self.discarded {
            *h.entry(d.reason.as_str().to_owned()).or_insert(0) += 1;
        }
        h
    }

    pub fn total(&self) -> usize {
        self.kept.len() + self.discarded.len() + self.retry.len() + self.aborted.len()
    }
}

enum Verdict {
    Keep,
    Discard(DiscardReason),
    Retry,
    Aborted,
}

/// Keep exactly the answered trajectories whose final answer is correct.
pub fn rejection_filter(
    trajectories: Vec<Trajectory>,
    judge: Option<&dyn LanguageModel>,
    prompts: &PromptBundle,
) -> Result<FilterOutcome> {
    for t in &trajectories {
        if t.gold_answers().iter().all(|g| g.trim().is_empty()) {
            return Err(Error::usage(format!("trajectory {} has no gold answer", t.id)));
        }
    }
    let verdicts: Vec<Result<Verdict>> = trajectories
        .par_iter()
        .map(|t| match t.status {
            Status::Aborted => Ok(Verdict::Aborted),
            Status::FormatError => Ok(Verdict::Discard(DiscardReason::FormatError)),
            Status::Exhausted | Status::Open => Ok(Verdict::Discard(DiscardReason::Incomplete)),
            Status::Answered => {
                let answer = t.final_answer().unwrap_or_default();
                match answer_correctness(answer, &t.gold_answers(), &t.question, judge, prompts) {
                    Ok(j) if j.value == 1 => Ok(Verdict::Keep),
                    Ok(_) => Ok(Verdict::Discard(DiscardReason::Incorrect)),
                    Err(e) if e.is_transport() => Ok(Verdict::Retry),
                    Err(e) => Err(e),
                }
            }
        })
        .collect();

    let mut out = FilterOutcome::default();
    for (t, v) in trajectories.into_iter().zip(verdicts) {
        match v? {
            Verdict::Keep => out.kept.push(t),
            Verdict::Discard(reason) => out.discarded.push(Discarded { reason, trajectory: t }),
            Verdict::Retry => out.retry.push(t),
            Verdict::Aborted => out.aborted.push(t),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    pub input: String,
    pub output: String,
}

/// One pair per step: the question plus all earlier steps (with their
/// documents) as input, the step itself (without documents) as output.
pub fn sft_pairs(trajectory: &Trajectory) -> Result<Vec<SftPair>> {
    if trajectory.status != Status::Answered {
        return Err(Error::usage(format!(
            "trajectory {} is {}; only answered trajectories export",
            trajectory.id,
            trajectory.status.as_str()
        )));
    }
    trajectory.validate()?;
    let pairs = trajectory
        .steps
        .iter()
        .enumerate()
        .map(|(j, step)| SftPair {
            input: format!("{}{}", trajectory.question, render_history(&trajectory.steps[..j])),
            output: render_step_output(step),
        })
        .collect();
    Ok(pairs)
}

/// Recover the prior steps from an SFT input.
pub fn parse_sft_input(input: &str, question: &str) -> Result<Vec<crate::model::Step>> {
    let rest = input
        .strip_prefix(question)
        .ok_or_else(|| Error::validation("input does not begin with the question"))?;
    parse_history(rest)
}

/// Sample trajectories for RL with no filtering. The batch questions must
/// not overlap the cold-start question set (compared after lowercasing and
/// whitespace collapsing).
pub fn sample_rl_batch<M, R>(
    items: &[QaItem],
    model: &M,
    retriever: &R,
    prompts: &PromptBundle,
    run: &GenerationRun,
    excluded: &HashSet<String>,
) -> Result<Vec<Trajectory>>
where
    M: LanguageModel + ?Sized,
    R: Retriever + ?Sized,
{
    if run.keep_policy != KeepPolicy::KeepAll {
        return Err(Error::usage("RL sampling requires keep_policy = keep_all"));
    }
    if let Some(item) = items.iter().find(|i| excluded.contains(&question_key(&i.question))) {
        return Err(Error::usage(format!(
            "question overlaps the cold-start set: {:?}",
            item.question
        )));
    }
    generate_dataset(items, model, retriever, prompts, run)
}

/// Keys used for the RL/cold-start disjointness check.
pub fn question_keys(items: &[QaItem]) -> HashSet<String> {
    items.iter().map(|i| question_key(&i.question)).collect()
}
