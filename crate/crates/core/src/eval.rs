//! Evaluation loop, single-shot RAG baseline, and QA metrics.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{parse_into_step, PromptBundle};
use crate::gateway::{CompletionRequest, GenerationParams, LanguageModel};
use crate::model::{item_ids, QaItem, Status, Step, StepKind, Trajectory};
use crate::retrieval::{truncate, Retriever};
use crate::reward::{acc_model, Judged};
use crate::rollout::{estimate_tokens, rollout, RolloutConfig};
use crate::text::{answer_tokens, normalize_answer};

/// Analysis text of the synthetic retrieval step in baseline trajectories.
pub const BASELINE_ANALYSIS: &str = "Retrieve documents for the original question.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub max_iterations: usize,
    pub top_k: usize,
    pub baseline_top_k: usize,
    pub truncate_in_eval: bool,
    pub truncate_chars: usize,
    /// Fail the whole run when any item aborts.
    pub strict: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            top_k: 5,
            baseline_top_k: 16,
            truncate_in_eval: false,
            truncate_chars: 512,
            strict: true,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.top_k == 0 || self.baseline_top_k == 0 {
            return Err(Error::validation(
                "max_iterations, top_k and baseline_top_k must be positive",
            ));
        }
        if self.truncate_chars == 0 {
            return Err(Error::validation("truncate_chars must be positive"));
        }
        Ok(())
    }

    fn truncation(&self) -> Option<usize> {
        self.truncate_in_eval.then_some(self.truncate_chars)
    }

    fn rollout_config(&self, top_k: usize) -> RolloutConfig {
        RolloutConfig {
            top_k,
            truncate_chars: self.truncation(),
            params: GenerationParams::default(),
        }
    }
}

pub fn run_loop<M, R>(
    item: &QaItem,
    id: &str,
    policy: &M,
    retriever: &R,
    prompts: &PromptBundle,
    config: &LoopConfig,
) -> Result<Trajectory>
where
    M: LanguageModel + ?Sized,
    R: Retriever + ?Sized,
{
    config.validate()?;
    item.validate()?;
    let seed = item.start_trajectory(id, config.max_iterations);
    rollout(seed, policy, retriever, prompts, &config.rollout_config(config.top_k))
}

/// One retrieval with the question as query, then one generation.
pub fn run_baseline_rag<M, R>(
    item: &QaItem,
    id: &str,
    policy: &M,
    retriever: &R,
    prompts: &PromptBundle,
    config: &LoopConfig,
) -> Result<Trajectory>
where
    M: LanguageModel + ?Sized,
    R: Retriever + ?Sized,
{
    config.validate()?;
    item.validate()?;
    let mut t = item.start_trajectory(id, 2);
    let docs = match retriever.retrieve(&item.question, config.baseline_top_k) {
        Ok(docs) => docs,
        Err(e) => {
            t.abort(format!("retrieval failed: {e}"));
            return Ok(t);
        }
    };
    let docs: Vec<_> = docs
        .into_iter()
        .take(config.baseline_top_k)
        .map(|d| match config.truncation() {
            Some(cap) => truncate(&d, cap),
            None => d,
        })
        .collect();
    let prompt = prompts.render_baseline_prompt(&item.question, &docs);
    t.append_step(Step::query(BASELINE_ANALYSIS, item.question.clone()).with_documents(docs))?;
    let request = CompletionRequest {
        prompt,
        question: item.question.clone(),
        turn: 1,
        params: GenerationParams::default(),
    };
    t.usage.model_calls += 1;
    let completion = match policy.complete(&request) {
        Ok(c) => c,
        Err(e) => {
            t.abort(format!("model call failed: {e}"));
            return Ok(t);
        }
    };
    match completion.usage_tokens {
        Some(n) => t.usage.tokens += n,
        None => {
            t.usage.tokens += estimate_tokens(&request.prompt, &completion.text);
            t.usage.tokens_estimated = true;
        }
    }
    let step = parse_into_step(&completion.text);
    let step = match step.kind {
        StepKind::Query => Step::invalid(completion.text.clone(), crate::format::FormatViolation::NoPayload),
        _ => step,
    };
    t.append_step(step)?;
    Ok(t)
}

/// First line of the final answer, trimmed; empty unless answered.
pub fn extract_answer(trajectory: &Trajectory) -> String {
    if trajectory.status != Status::Answered {
        return String::new();
    }
    trajectory
        .final_answer()
        .and_then(|a| a.trim().lines().next())
        .unwrap_or_default()
        .trim()
        .to_owned()
}

pub fn exact_match(prediction: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(prediction) == normalize_answer(gold))
}

/// Token-level F1 over the multiset overlap of normalized tokens.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = answer_tokens(prediction);
    let g = answer_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Judge verdict on semantic correctness.
pub fn judge_accuracy(
    prediction: &str,
    gold: &str,
    question: &str,
    judge: &dyn LanguageModel,
    prompts: &PromptBundle,
) -> Result<Judged<u8>> {
    acc_model(prediction, gold, question, judge, prompts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub acc: f64,
    pub steps_used: usize,
    pub tokens_used: u64,
    pub status: Status,
    pub prediction: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccSource {
    Judge,
    /// No judge configured; accuracy falls back to exact match.
    ExactMatch,
}

/// Per-item metrics. Best score across all gold strings; a prediction that
/// already matches skips the judge. Unanswered items score 0 everywhere.
pub fn score_item(
    trajectory: &Trajectory,
    judge: Option<&dyn LanguageModel>,
    prompts: &PromptBundle,
) -> Result<(ItemResult, Vec<String>)> {
    let prediction = extract_answer(trajectory);
    let golds = trajectory.gold_answers();
    if golds.is_empty() {
        return Err(Error::usage(format!("item {} has no gold answer", trajectory.id)));
    }
    let answered = trajectory.status == Status::Answered && !prediction.is_empty();
    let mut warnings = Vec::new();
    let (em, f1, acc) = if answered {
        let em = golds.iter().map(|g| exact_match(&prediction, g)).max().unwrap_or(0);
        let f1 = golds.iter().map(|g| token_f1(&prediction, g)).fold(0.0, f64::max);
        let acc = match judge {
            Some(_) if em == 1 => 1,
            Some(j) => {
                let v = judge_accuracy(&prediction, golds[0], &trajectory.question, j, prompts)?;
                warnings.extend(v.warning);
                v.value
            }
            None => em,
        };
        (f64::from(em), f1, f64::from(acc))
    } else {
        (0.0, 0.0, 0.0)
    };
    Ok((
        ItemResult {
            id: trajectory.id.clone(),
            em,
            f1,
            acc,
            steps_used: trajectory.steps.len(),
            tokens_used: trajectory.usage.tokens,
            status: trajectory.status,
            prediction,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub em: f64,
    pub f1: f64,
    pub acc: f64,
    pub n: usize,
    pub acc_source: AccSource,
    pub tokens_total: u64,
    pub tokens_correct: u64,
    pub correct: usize,
    /// Mean tokens per item with acc = 1; absent when nothing is correct.
    pub avg_tokens_per_correct: Option<f64>,
    /// "reported", "estimated" (characters / 4) or "mixed".
    pub token_accounting: String,
    pub warnings: usize,
    pub failures: Vec<EvalFailure>,
    pub per_item: Vec<ItemResult>,
}

/// Means over `per_item` in order. Tokens are also summed over items with
/// acc = 1.
pub fn aggregate(
    per_item: Vec<ItemResult>,
    acc_source: AccSource,
    token_accounting: &str,
    failures: Vec<EvalFailure>,
    warnings: usize,
) -> Result<MetricReport> {
    if per_item.is_empty() {
        return Err(Error::usage("cannot aggregate an empty result set"));
    }
    let n = per_item.len();
    let mean = |f: fn(&ItemResult) -> f64| per_item.iter().map(f).sum::<f64>() / n as f64;
    let em = mean(|r| r.em);
    let f1 = mean(|r| r.f1);
    let acc = mean(|r| r.acc);
    let tokens_total = per_item.iter().map(|r| r.tokens_used).sum();
    let correct: Vec<&ItemResult> = per_item.iter().filter(|r| r.acc == 1.0).collect();
    let tokens_correct: u64 = correct.iter().map(|r| r.tokens_used).sum();
    let avg_tokens_per_correct = (!correct.is_empty()).then(|| tokens_correct as f64 / correct.len() as f64);
    Ok(MetricReport {
        em,
        f1,
        acc,
        n,
        acc_source,
        tokens_total,
        tokens_correct,
        correct: correct.len(),
        avg_tokens_per_correct,
        token_accounting: token_accounting.to_owned(),
        warnings,
        failures,
        per_item,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Loop,
    Baseline,
}

/// Trajectories and the report of an evaluation run.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub trajectories: Vec<Trajectory>,
    pub report: MetricReport,
}

/// Evaluate every item. In strict mode any aborted item fails the run;
/// otherwise aborted items are excluded from the means and listed as
/// failures.
pub fn evaluate<M, R>(
    items: &[QaItem],
    mode: EvalMode,
    policy: &M,
    retriever: &R,
    judge: Option<&dyn LanguageModel>,
    prompts: &PromptBundle,
    config: &LoopConfig,
) -> Result<EvalRun>
where
    M: LanguageModel + ?Sized,
    R: Retriever + ?Sized,
{
    config.validate()?;
    let ids = item_ids(items);
    let trajectories: Vec<Trajectory> = items
        .par_iter()
        .zip(ids.par_iter())
        .map(|(item, id)| match mode {
            EvalMode::Loop => run_loop(item, id, policy, retriever, prompts, config),
            EvalMode::Baseline => run_baseline_rag(item, id, policy, retriever, prompts, config),
        })
        .collect::<Result<_>>()?;

    let failures: Vec<EvalFailure> = trajectories
        .iter()
        .filter(|t| t.status == Status::Aborted)
        .map(|t| EvalFailure {
            id: t.id.clone(),
            reason: t.abort_reason.clone().unwrap_or_default(),
        })
        .collect();
    if !failures.is_empty() && (config.strict || failures.len() == trajectories.len()) {
        let list: Vec<String> = failures.iter().map(|f| format!("{}: {}", f.id, f.reason)).collect();
        return Err(Error::Transport {
            message: format!("{} item(s) aborted: {}", failures.len(), list.join("; ")),
            attempts: 0,
        });
    }

    let scored: Vec<(ItemResult, Vec<String>)> = trajectories
        .par_iter()
        .filter(|t| t.status != Status::Aborted)
        .map(|t| score_item(t, judge, prompts))
        .collect::<Result<_>>()?;
    let warnings = scored.iter().map(|(_, w)| w.len()).sum();
    let per_item: Vec<ItemResult> = scored.into_iter().map(|(r, _)| r).collect();

    let estimated = trajectories.iter().filter(|t| t.usage.tokens_estimated).count();
    let accounting = match estimated {
        0 => "reported",
        n if n == trajectories.len() => "estimated",
        _ => "mixed",
    };
    let source = if judge.is_some() { AccSource::Judge } else { AccSource::ExactMatch };
    let report = aggregate(per_item, source, accounting, failures, warnings)?;
    Ok(EvalRun { trajectories, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FnModel, PatternModel, ScriptedModel};
    use crate::model::Document;
    use crate::retrieval::{Bm25Params, Corpus};

    fn corpus(n: usize) -> Corpus {
        let docs = (0..n)
            .map(|i| Document::new(format!("d{i:02}"), format!("Doc {i}"), format!("shared term number{i}")))
            .collect();
        Corpus::build(docs, Bm25Params::default()).unwrap()
    }

    fn a(answer: &str) -> String {
        format!("The problem analysis: ok.\nThe final answer: {answer}")
    }

    #[test]
    fn em_cases() {
        assert_eq!(exact_match("the Alps", "Alps"), 1);
        assert_eq!(exact_match("1945", "1945."), 1);
        assert_eq!(exact_match("Paris", "London"), 0);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(token_f1("william klein", "William Klein"), 1.0);
        assert!((token_f1("B. S. Ranga director", "B. S. Ranga") - 6.0 / 7.0).abs() < 1e-9);
        assert_eq!(token_f1("x", "y"), 0.0);
        assert_eq!(token_f1("", "the"), 1.0);
        assert_eq!(token_f1("", "x"), 0.0);
    }

    #[test]
    fn extraction() {
        let mut t = Trajectory::new("t", "q", 5).with_gold("g");
        t.append_step(Step::answer("a", " William Klein \nbecause")).unwrap();
        assert_eq!(extract_answer(&t), "William Klein");
        let mut t = Trajectory::new("t", "q", 1).with_gold("g");
        t.append_step(Step::query("a", "b")).unwrap();
        assert_eq!(extract_answer(&t), "");
    }

    #[test]
    fn aggregate_means() {
        let row = |id: &str, em: f64, f1: f64, acc: f64, tok: u64| ItemResult {
            id: id.into(),
            em,
            f1,
            acc,
            steps_used: 1,
            tokens_used: tok,
            status: Status::Answered,
            prediction: String::new(),
        };
        let r = aggregate(
            vec![row("a", 1.0, 1.0, 1.0, 10), row("b", 0.0, 0.5, 1.0, 20)],
            AccSource::Judge,
            "reported",
            vec![],
            0,
        )
        .unwrap();
        assert_eq!((r.em, r.f1, r.acc), (0.5, 0.75, 1.0));
        let r = aggregate(
            vec![row("a", 1.0, 1.0, 1.0, 100), row("b", 0.0, 0.0, 0.0, 50), row("c", 1.0, 1.0, 1.0, 40)],
            AccSource::Judge,
            "reported",
            vec![],
            0,
        )
        .unwrap();
        assert_eq!(r.tokens_correct, 140);
        assert_eq!(r.avg_tokens_per_correct, Some(70.0));
        assert!(aggregate(vec![], AccSource::Judge, "reported", vec![], 0).is_err());
    }

    #[test]
    fn baseline_shape() {
        let item = QaItem::new("shared question", "x");
        let seen = std::sync::Mutex::new(String::new());
        let policy = FnModel(|r: &CompletionRequest| {
            *seen.lock().unwrap() = r.prompt.clone();
            Ok(a("x"))
        });
        let t = run_baseline_rag(&item, "i", &policy, &corpus(20), &PromptBundle::default(), &LoopConfig::default())
            .unwrap();
        assert_eq!(t.status, Status::Answered);
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.steps[0].documents.len(), 16);
        assert_eq!(seen.lock().unwrap().matches("[Document ").count(), 16);

        let bad = ScriptedModel::new("no headers here");
        let t = run_baseline_rag(&item, "i", &bad, &corpus(3), &PromptBundle::default(), &LoopConfig::default())
            .unwrap();
        assert_eq!(t.status, Status::FormatError);
    }

    #[test]
    fn strict_mode_fails_on_abort() {
        let items = vec![QaItem::new("q1", "x"), QaItem::new("q2", "x")];
        let policy = FnModel(|r: &CompletionRequest| {
            if r.question == "q2" {
                Err(Error::Transport { message: "down".into(), attempts: 4 })
            } else {
                Ok(a("x"))
            }
        });
        let c = corpus(3);
        let p = PromptBundle::default();
        let strict = LoopConfig::default();
        assert!(evaluate(&items, EvalMode::Loop, &policy, &c, None, &p, &strict).is_err());
        let lax = LoopConfig { strict: false, ..LoopConfig::default() };
        let run = evaluate(&items, EvalMode::Loop, &policy, &c, None, &p, &lax).unwrap();
        assert_eq!(run.report.n, 1);
        assert_eq!(run.report.failures.len(), 1);
        assert_eq!(run.report.acc, 1.0);
    }

    #[test]
    fn judge_used_for_accuracy() {
        let items = vec![QaItem::new("q1", "Paris")];
        let policy = ScriptedModel::new(a("City of Light"));
        let judge = PatternModel::new("yes");
        let run = evaluate(&items, EvalMode::Loop, &policy, &corpus(3), Some(&judge), &PromptBundle::default(), &LoopConfig::default())
            .unwrap();
        assert_eq!((run.report.em, run.report.acc), (0.0, 1.0));
        assert_eq!(run.report.acc_source, AccSource::Judge);
    }
}
