//! Outcome and process rewards for trajectories.
//!
//! Per step: a format validity bit, answer correctness on the final step
//! (string match OR judge verdict), and judged document relevance on
//! retrieval steps, snapped to a 0.1 grid. The step reward is
//! `val * (acc + rel) + val - 1`, then scaled per trajectory by an
//! outcome-dependent factor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::format::PromptBundle;
use crate::gateway::{CompletionRequest, LanguageModel};
use crate::model::{Document, Status, StepKind, Trajectory};
use crate::text::normalize_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `r_all = r * lambda(outcome)`.
    Multiplicative,
    /// `r_all = r + gamma(outcome)`.
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub mode: ScalingMode,
    pub relevance_grid_step: f64,
    pub lambda_correct: f64,
    pub lambda_incorrect: f64,
    pub lambda_format_error: f64,
    pub gamma_correct: f64,
    pub gamma_incorrect: f64,
    pub gamma_fail: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: ScalingMode::Multiplicative,
            relevance_grid_step: 0.1,
            lambda_correct: 1.5,
            lambda_incorrect: 0.5,
            lambda_format_error: 1.0,
            gamma_correct: 0.6,
            gamma_incorrect: -0.2,
            gamma_fail: -0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_correct > 1.0 && self.lambda_correct.is_finite()) {
            return Err(Error::validation("lambda_correct must be greater than 1"));
        }
        if !(self.lambda_incorrect > 0.0 && self.lambda_incorrect < 1.0) {
            return Err(Error::validation("lambda_incorrect must lie in (0, 1)"));
        }
        if self.lambda_format_error != 1.0 {
            return Err(Error::validation("lambda_format_error must be 1"));
        }
        for g in [self.gamma_correct, self.gamma_incorrect, self.gamma_fail] {
            if !g.is_finite() {
                return Err(Error::validation("additive offsets must be finite"));
            }
        }
        self.grid_intervals().map(|_| ())
    }

    /// Number of grid intervals in [0, 1]; the step must divide 1 evenly.
    pub fn grid_intervals(&self) -> Result<u32> {
        let step = self.relevance_grid_step;
        if !(step > 0.0 && step <= 1.0) {
            return Err(Error::validation("relevance_grid_step must lie in (0, 1]"));
        }
        let n = (1.0 / step).round();
        if (n * step - 1.0).abs() > 1e-9 {
            return Err(Error::validation("relevance_grid_step must divide 1 evenly"));
        }
        Ok(n as u32)
    }

    /// (multiplier, offset) applied to every step reward for this outcome.
    pub fn factors(&self, outcome: Outcome) -> (f64, f64) {
        match (self.mode, outcome) {
            (ScalingMode::Multiplicative, Outcome::Correct) => (self.lambda_correct, 0.0),
            (ScalingMode::Multiplicative, Outcome::Incorrect) => (self.lambda_incorrect, 0.0),
            (ScalingMode::Multiplicative, Outcome::FormatError) => (self.lambda_format_error, 0.0),
            (ScalingMode::Additive, Outcome::Correct) => (1.0, self.gamma_correct),
            (ScalingMode::Additive, Outcome::Incorrect) => (1.0, self.gamma_incorrect),
            (ScalingMode::Additive, Outcome::FormatError) => (1.0, self.gamma_fail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Incorrect,
    FormatError,
}

/// A judged value plus a warning when the judge reply could not be read.
#[derive(Debug, Clone, PartialEq)]
pub struct Judged<T> {
    pub value: T,
    pub warning: Option<String>,
    pub judge_calls: u32,
}

impl<T> Judged<T> {
    fn clean(value: T, judge_calls: u32) -> Self {
        Self {
            value,
            warning: None,
            judge_calls,
        }
    }
}

pub fn acc_match(prediction: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(prediction) == normalize_answer(gold))
}

/// Read a yes/no verdict from the first word of a judge reply.
pub fn parse_verdict(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" | "true" | "correct" => Some(true),
        "no" | "false" | "incorrect" => Some(false),
        _ => None,
    }
}

pub fn acc_model(
    prediction: &str,
    gold: &str,
    question: &str,
    judge: &dyn LanguageModel,
    prompts: &PromptBundle,
) -> Result<Judged<u8>> {
    if gold.trim().is_empty() {
        return Err(Error::usage("gold answer must be nonempty"));
    }
    let prompt = prompts.render_answer_judge_prompt(question, prediction, gold);
    let reply = judge.complete(&CompletionRequest::judge(prompt, question))?;
    Ok(match parse_verdict(&reply.text) {
        Some(v) => Judged::clean(u8::from(v), 1),
        None => {
            let warning = format!("unparseable answer verdict {:?}; scored 0", reply.text);
            warn!("{warning}");
            Judged {
                value: 0,
                warning: Some(warning),
                judge_calls: 1,
            }
        }
    })
}

/// Match against any gold string; the judge is consulted (against the
/// primary gold) only when no string matches.
pub fn answer_correctness(
    prediction: &str,
    golds: &[&str],
    question: &str,
    judge: Option<&dyn LanguageModel>,
    prompts: &PromptBundle,
) -> Result<Judged<u8>> {
    let Some(primary) = golds.first().filter(|g| !g.trim().is_empty()) else {
        return Err(Error::usage("gold answer must be nonempty"));
    };
    if golds.iter().any(|g| acc_match(prediction, g) == 1) {
        return Ok(Judged::clean(1, 0));
    }
    match judge {
        Some(judge) => acc_model(prediction, primary, question, judge, prompts),
        None => Ok(Judged::clean(0, 0)),
    }
}

/// First decimal literal in `text` as (negative, mantissa, fraction digits).
fn first_decimal(text: &str) -> Option<(bool, u128, u32)> {
    let bytes = text.as_bytes();
    let start = (0..bytes.len()).find(|&i| {
        bytes[i].is_ascii_digit()
            || (bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))
    })?;
    let negative = start > 0 && bytes[start - 1] == b'-';
    let mut mantissa: u128 = 0;
    let mut scale = 0u32;
    let mut seen_dot = false;
    let mut digits = 0;
    for &b in &bytes[start..] {
        match b {
            b'0'..=b'9' => {
                if digits < 30 {
                    mantissa = mantissa * 10 + u128::from(b - b'0');
                    digits += 1;
                    if seen_dot {
                        scale += 1;
                    }
                }
            }
            b'.' if !seen_dot => seen_dot = true,
            _ => break,
        }
    }
    Some((negative, mantissa, scale))
}

/// Parse a relevance score: first numeric literal, snapped to the nearest
/// grid point (halves round away from zero), then clamped to [0, 1].
/// Snapping uses exact decimal arithmetic on the literal.
pub fn parse_relevance(reply: &str, grid_intervals: u32) -> Option<f64> {
    let (negative, mantissa, scale) = first_decimal(reply)?;
    let n = u128::from(grid_intervals.max(1));
    let denom = 10u128.pow(scale);
    let steps = (2 * mantissa * n + denom) / (2 * denom);
    let snapped = steps as f64 / n as f64;
    let signed = if negative { -snapped } else { snapped };
    Some(signed.clamp(0.0, 1.0))
}

/// Judge the documents of one retrieval step jointly against the original
/// question. A step that retrieved nothing scores 0 without a judge call.
pub fn doc_relevance(
    question: &str,
    documents: &[Document],
    judge: &dyn LanguageModel,
    prompts: &PromptBundle,
    config: &RewardConfig,
) -> Result<Judged<f64>> {
    if documents.is_empty() {
        return Ok(Judged::clean(0.0, 0));
    }
    let n = config.grid_intervals()?;
    let prompt = prompts.render_relevance_prompt(question, documents);
    let reply = judge.complete(&CompletionRequest::judge(prompt, question))?;
    Ok(match parse_relevance(&reply.text, n) {
        Some(rel) => Judged::clean(rel, 1),
        None => {
            let warning = format!("unparseable relevance score {:?}; scored 0", reply.text);
            warn!("{warning}");
            Judged {
                value: 0.0,
                warning: Some(warning),
                judge_calls: 1,
            }
        }
    })
}

/// `val * (acc + rel) + val - 1`.
pub fn step_reward(val: u8, acc: u8, rel: f64, is_final: bool) -> Result<f64> {
    if val > 1 || acc > 1 {
        return Err(Error::usage("val and acc must be 0 or 1"));
    }
    if !(0.0..=1.0).contains(&rel) {
        return Err(Error::usage("rel must lie in [0, 1]"));
    }
    if !is_final && acc != 0 {
        return Err(Error::usage("acc must be 0 on intermediate steps"));
    }
    if is_final && rel != 0.0 {
        return Err(Error::usage("rel must be 0 on the final step"));
    }
    let v = f64::from(val);
    Ok(v * (f64::from(acc) + rel) + v - 1.0)
}

/// Apply the outcome factor to every step reward.
pub fn trajectory_scale(step_rewards: &[f64], outcome: Outcome, config: &RewardConfig) -> Vec<f64> {
    let (lambda, offset) = config.factors(outcome);
    step_rewards.iter().map(|r| r * lambda + offset).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub step_index: usize,
    pub val: u8,
    pub acc: u8,
    pub rel: f64,
    pub step_reward: f64,
    pub scaled_reward: f64,
    pub lambda_used: f64,
    pub offset_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScore {
    pub trajectory_id: String,
    pub outcome: Outcome,
    pub breakdowns: Vec<RewardBreakdown>,
    pub warnings: Vec<String>,
    pub judge_calls: u32,
}

/// One line of reward JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub trajectory_id: String,
    pub step_index: usize,
    pub outcome: Outcome,
    pub val: u8,
    pub acc: u8,
    pub rel: f64,
    pub step_reward: f64,
    pub scaled_reward: f64,
    pub lambda_used: f64,
    pub offset_used: f64,
}

impl TrajectoryScore {
    pub fn scaled_rewards(&self) -> Vec<f64> {
        self.breakdowns.iter().map(|b| b.scaled_reward).collect()
    }

    pub fn records(&self) -> Vec<RewardRecord> {
        self.breakdowns
            .iter()
            .map(|b| RewardRecord {
                trajectory_id: self.trajectory_id.clone(),
                step_index: b.step_index,
                outcome: self.outcome,
                val: b.val,
                acc: b.acc,
                rel: b.rel,
                step_reward: b.step_reward,
                scaled_reward: b.scaled_reward,
                lambda_used: b.lambda_used,
                offset_used: b.offset_used,
            })
            .collect()
    }
}

type StepJudgement = (u8, Judged<u8>, Judged<f64>, bool);

/// Score every step of a finished trajectory. Exhausted trajectories have
/// no answer: all steps are intermediate and the outcome is `Incorrect`.
pub fn score_trajectory(
    trajectory: &Trajectory,
    judge: &dyn LanguageModel,
    prompts: &PromptBundle,
    config: &RewardConfig,
) -> Result<TrajectoryScore> {
    if trajectory.is_empty() {
        return Err(Error::usage(format!("trajectory {} has no steps", trajectory.id)));
    }
    if matches!(trajectory.status, Status::Open | Status::Aborted) {
        return Err(Error::usage(format!(
            "trajectory {} is {} and cannot be scored",
            trajectory.id,
            trajectory.status.as_str()
        )));
    }
    let golds = trajectory.gold_answers();
    if trajectory.status == Status::Answered && golds.is_empty() {
        return Err(Error::usage(format!("trajectory {} has no gold answer", trajectory.id)));
    }

    // (val, acc, rel, is_final) per step; judge calls are independent.
    let judged: Vec<Result<StepJudgement>> = trajectory
        .steps
        .par_iter()
        .map(|step| match step.kind {
            StepKind::Invalid => Ok((0, Judged::clean(0, 0), Judged::clean(0.0, 0), true)),
            StepKind::Query => {
                let rel = doc_relevance(&trajectory.question, &step.documents, judge, prompts, config)?;
                Ok((1, Judged::clean(0, 0), rel, false))
            }
            StepKind::Answer => {
                let answer = step.answer.as_deref().unwrap_or_default();
                let acc = answer_correctness(answer, &golds, &trajectory.question, Some(judge), prompts)?;
                Ok((1, acc, Judged::clean(0.0, 0), true))
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(judged.len());
    let mut warnings = Vec::new();
    let mut judge_calls = 0;
    for item in judged {
        let (val, acc, rel, is_final) = item?;
        judge_calls += acc.judge_calls + rel.judge_calls;
        warnings.extend(acc.warning);
        warnings.extend(rel.warning);
        rows.push((val, acc.value, rel.value, is_final));
    }

    let outcome = match trajectory.status {
        Status::FormatError => Outcome::FormatError,
        Status::Answered if rows.last().is_some_and(|r| r.1 == 1) => Outcome::Correct,
        _ => Outcome::Incorrect,
    };
    let raw: Vec<f64> = rows
        .iter()
        .map(|&(val, acc, rel, is_final)| step_reward(val, acc, rel, is_final))
        .collect::<Result<_>>()?;
    let scaled = trajectory_scale(&raw, outcome, config);
    let (lambda, offset) = config.factors(outcome);
    let breakdowns = rows
        .iter()
        .zip(raw.iter().zip(&scaled))
        .enumerate()
        .map(|(i, (&(val, acc, rel, _), (&r, &s)))| RewardBreakdown {
            step_index: i,
            val,
            acc,
            rel,
            step_reward: r,
            scaled_reward: s,
            lambda_used: lambda,
            offset_used: offset,
        })
        .collect();
    Ok(TrajectoryScore {
        trajectory_id: trajectory.id.clone(),
        outcome,
        breakdowns,
        warnings,
        judge_calls,
    })
}
