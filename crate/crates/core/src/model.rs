//! Trajectory and step data model.
//!
//! A trajectory is the ordered list of reasoning turns produced for one
//! question. Every turn except possibly the last carries a retrieval query
//! and the documents the retriever returned for it; a terminal turn carries
//! the final answer. Trajectories serialize as one JSON object per line.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::FormatViolation;

/// Version written into every serialized trajectory.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub score: f64,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            body: body.into(),
            score: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Query,
    Answer,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub analysis: String,
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub documents: Vec<Document>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    /// Why an invalid step was rejected by the parser.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<FormatViolation>,
    /// The unparsed model output.
    #[serde(default)]
    pub raw: String,
}

impl Step {
    pub fn query(analysis: impl Into<String>, query: impl Into<String>) -> Self {
        Self {
            analysis: analysis.into(),
            kind: StepKind::Query,
            query: Some(query.into()),
            documents: Vec::new(),
            answer: None,
            violation: None,
            raw: String::new(),
        }
    }

    pub fn answer(analysis: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            analysis: analysis.into(),
            kind: StepKind::Answer,
            query: None,
            documents: Vec::new(),
            answer: Some(answer.into()),
            violation: None,
            raw: String::new(),
        }
    }

    pub fn invalid(raw: impl Into<String>, violation: FormatViolation) -> Self {
        Self {
            analysis: String::new(),
            kind: StepKind::Invalid,
            query: None,
            documents: Vec::new(),
            answer: None,
            violation: Some(violation),
            raw: raw.into(),
        }
    }

    pub fn with_documents(mut self, documents: Vec<Document>) -> Self {
        self.documents = documents;
        self
    }

    pub fn with_raw(mut self, raw: impl Into<String>) -> Self {
        self.raw = raw.into();
        self
    }

    pub fn is_terminal(&self) -> bool {
        self.kind != StepKind::Query
    }

    /// Check the per-step invariants; `path` prefixes error field names.
    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::parse(format!("{path}.{field}"), msg));
        match self.kind {
            StepKind::Query => {
                if self.query.is_none() {
                    return bad("query", "query step without a query");
                }
                if self.answer.is_some() {
                    return bad("answer", "query step must not carry an answer");
                }
            }
            StepKind::Answer => {
                if self.answer.is_none() {
                    return bad("answer", "answer step without an answer");
                }
                if self.query.is_some() {
                    return bad("query", "answer step must not carry a query");
                }
                if !self.documents.is_empty() {
                    return bad("documents", "answer step must not carry documents");
                }
            }
            StepKind::Invalid => {
                if self.query.is_some() || self.answer.is_some() {
                    return bad("kind", "invalid step must carry neither query nor answer");
                }
                if !self.documents.is_empty() {
                    return bad("documents", "invalid step must not carry documents");
                }
            }
        }
        if self.kind != StepKind::Invalid && self.analysis.trim().is_empty() {
            return bad("analysis", "analysis must be nonempty");
        }
        for (i, doc) in self.documents.iter().enumerate() {
            if doc.id.is_empty() {
                return bad(&format!("documents[{i}].id"), "document id must be nonempty");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Still accepting steps.
    Open,
    Answered,
    /// Hit the iteration cap without an answer.
    Exhausted,
    FormatError,
    /// Stopped by an infrastructure failure (model or retriever transport).
    Aborted,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        self != Status::Open
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Open => "open",
            Status::Answered => "answered",
            Status::Exhausted => "exhausted",
            Status::FormatError => "format_error",
            Status::Aborted => "aborted",
        }
    }
}

/// Status implied by a step list under an iteration cap.
pub fn derive_status(steps: &[Step], max_iterations: usize) -> Status {
    if steps.iter().any(|s| s.kind == StepKind::Invalid) {
        Status::FormatError
    } else if steps.last().map(|s| s.kind) == Some(StepKind::Answer) {
        Status::Answered
    } else if steps.len() >= max_iterations {
        Status::Exhausted
    } else {
        Status::Open
    }
}

/// Model-call accounting attached by the rollout loop.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub model_calls: u32,
    pub tokens: u64,
    /// True when at least one call did not report usage and a
    /// characters/4 estimate was used instead.
    pub tokens_estimated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema_version: u32,
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    /// Further accepted answer strings beyond `gold_answer`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alt_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_tag: Option<String>,
    pub max_iterations: usize,
    pub steps: Vec<Step>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    #[serde(default)]
    pub sample_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub usage: Usage,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, question: impl Into<String>, max_iterations: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            question: question.into(),
            gold_answer: None,
            alt_answers: Vec::new(),
            dataset_tag: None,
            max_iterations,
            steps: Vec::new(),
            status: Status::Open,
            abort_reason: None,
            sample_index: 0,
            temperature: None,
            usage: Usage::default(),
        }
    }

    pub fn with_gold(mut self, gold: impl Into<String>) -> Self {
        self.gold_answer = Some(gold.into());
        self
    }

    /// Every accepted gold string, primary first.
    pub fn gold_answers(&self) -> Vec<&str> {
        self.gold_answer
            .iter()
            .chain(self.alt_answers.iter())
            .map(String::as_str)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_answer(&self) -> Option<&str> {
        match self.steps.last() {
            Some(step) if step.kind == StepKind::Answer => step.answer.as_deref(),
            _ => None,
        }
    }

    /// Append a step and recompute the status.
    pub fn append_step(&mut self, step: Step) -> Result<()> {
        if self.status.is_terminal() {
            return Err(Error::usage(format!(
                "cannot append to a trajectory with status {}",
                self.status.as_str()
            )));
        }
        self.steps.push(step);
        self.status = derive_status(&self.steps, self.max_iterations);
        Ok(())
    }

    /// Mark the trajectory as stopped by an infrastructure failure.
    pub fn abort(&mut self, reason: impl Into<String>) {
        self.status = Status::Aborted;
        self.abort_reason = Some(reason.into());
    }

    /// Check every structural invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::parse(
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        if self.question.trim().is_empty() {
            return Err(Error::parse("question", "question must be nonempty"));
        }
        if self.max_iterations == 0 {
            return Err(Error::parse("max_iterations", "must be at least 1"));
        }
        if self.steps.len() > self.max_iterations {
            return Err(Error::parse("steps", "more steps than max_iterations"));
        }
        let last = self.steps.len().saturating_sub(1);
        for (i, step) in self.steps.iter().enumerate() {
            step.validate(&format!("steps[{i}]"))?;
            if step.is_terminal() && i != last {
                return Err(Error::parse(
                    format!("steps[{i}].kind"),
                    "answer or invalid step must be the last step",
                ));
            }
        }
        let derived = derive_status(&self.steps, self.max_iterations);
        let consistent = match self.status {
            Status::Aborted => derived == Status::Open,
            s => s == derived,
        };
        if !consistent {
            return Err(Error::parse(
                "status",
                format!(
                    "status {} does not match steps (expected {})",
                    self.status.as_str(),
                    derived.as_str()
                ),
            ));
        }
        Ok(())
    }
}

/// Dataset row: a question with its accepted answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub golden_answers: Vec<String>,
    #[serde(default)]
    pub dataset_tag: String,
}

impl QaItem {
    pub fn new(question: impl Into<String>, gold: impl Into<String>) -> Self {
        Self {
            id: None,
            question: question.into(),
            golden_answers: vec![gold.into()],
            dataset_tag: String::new(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn gold_answer(&self) -> &str {
        self.golden_answers.first().map(String::as_str).unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::parse("question", "question must be nonempty"));
        }
        if self.gold_answer().trim().is_empty() {
            return Err(Error::parse(
                "golden_answers",
                "at least one nonempty gold answer is required",
            ));
        }
        Ok(())
    }

    /// Seed an empty trajectory for this item.
    pub fn start_trajectory(&self, id: impl Into<String>, max_iterations: usize) -> Trajectory {
        let mut t = Trajectory::new(id, self.question.clone(), max_iterations);
        t.gold_answer = self.golden_answers.first().cloned();
        t.alt_answers = self.golden_answers.iter().skip(1).cloned().collect();
        if !self.dataset_tag.is_empty() {
            t.dataset_tag = Some(self.dataset_tag.clone());
        }
        t
    }
}

/// Stable identifiers for a list of items: explicit ids, else `item-<n>`.
pub fn item_ids(items: &[QaItem]) -> Vec<String> {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| item.id.clone().unwrap_or_else(|| format!("item-{i}")))
        .collect()
}

pub fn serialize(trajectory: &Trajectory) -> Vec<u8> {
    serde_json::to_vec(trajectory).expect("trajectory serialization is infallible")
}

pub fn deserialize(bytes: &[u8]) -> Result<Trajectory> {
    let trajectory: Trajectory = decode_json(bytes)?;
    trajectory.validate()?;
    Ok(trajectory)
}

/// Decode JSON, reporting the path of the field that failed.
pub fn decode_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let field = if path == "." { "<root>".to_owned() } else { path };
        Error::parse(field, err.into_inner().to_string())
    })
}

/// Read a JSONL stream into records; blank lines are skipped. Errors carry
/// the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = decode_json(line.as_bytes()).map_err(|e| match e {
            Error::Parse { field, message } => Error::parse(format!("line {}: {field}", n + 1), message),
            other => other,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, records: &[T]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Read trajectories from JSONL, validating each one.
pub fn read_trajectories<R: BufRead>(reader: R) -> Result<Vec<Trajectory>> {
    let trajectories: Vec<Trajectory> = read_jsonl(reader)?;
    for (i, t) in trajectories.iter().enumerate() {
        t.validate().map_err(|e| match e {
            Error::Parse { field, message } => {
                Error::parse(format!("trajectory {} ({}): {field}", i + 1, t.id), message)
            }
            other => other,
        })?;
    }
    Ok(trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open() -> Trajectory {
        Trajectory::new("t", "Who directed X?", 5).with_gold("Y")
    }

    #[test]
    fn first_query_step_keeps_trajectory_open() {
        let mut t = open();
        t.append_step(Step::query("need director", "director of X")).unwrap();
        assert_eq!(t.status, Status::Open);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn answer_after_four_queries_terminates() {
        let mut t = open();
        for i in 0..4 {
            t.append_step(Step::query("a", format!("q{i}"))).unwrap();
        }
        t.append_step(Step::answer("done", "Y")).unwrap();
        assert_eq!(t.status, Status::Answered);
        assert_eq!(t.len(), 5);
    }

    #[test]
    fn invalid_step_marks_format_error() {
        let mut t = open();
        t.append_step(Step::query("a", "q")).unwrap();
        t.append_step(Step::invalid("garbage", FormatViolation::NoPayload))
            .unwrap();
        assert_eq!(t.status, Status::FormatError);
    }

    #[test]
    fn appending_to_terminal_trajectory_is_usage_error() {
        let mut t = open();
        t.append_step(Step::answer("a", "Y")).unwrap();
        let err = t.append_step(Step::query("a", "q")).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));

        let mut t = open();
        t.append_step(Step::invalid("x", FormatViolation::MissingAnalysis))
            .unwrap();
        assert!(t.append_step(Step::query("a", "q")).is_err());
    }

    #[test]
    fn exhaustion_at_cap() {
        let mut t = Trajectory::new("t", "q", 2);
        t.append_step(Step::query("a", "q1")).unwrap();
        t.append_step(Step::query("a", "q2")).unwrap();
        assert_eq!(t.status, Status::Exhausted);
        assert!(t.append_step(Step::query("a", "q3")).is_err());
    }

    #[test]
    fn round_trip() {
        let mut t = open();
        t.append_step(
            Step::query("a", "q").with_documents(vec![Document::new("d1", "T", "body")]),
        )
        .unwrap();
        t.append_step(Step::answer("b", "Y").with_raw("raw text")).unwrap();
        let back = deserialize(&serialize(&t)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_bytes_fail_to_parse() {
        let bytes = serialize(&open());
        let err = deserialize(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn unknown_status_names_the_field() {
        let text = String::from_utf8(serialize(&open()))
            .unwrap()
            .replace("\"open\"", "\"pending\"");
        match deserialize(text.as_bytes()).unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "status"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_status_rejected() {
        let mut t = open();
        t.append_step(Step::query("a", "q")).unwrap();
        t.status = Status::Answered;
        match deserialize(&serialize(&t)).unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "status"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn query_after_answer_rejected() {
        let mut t = open();
        t.steps.push(Step::answer("a", "Y"));
        t.steps.push(Step::query("a", "q"));
        t.status = Status::Open;
        match t.validate().unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "steps[0].kind"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aborted_requires_open_steps() {
        let mut t = open();
        t.append_step(Step::query("a", "q")).unwrap();
        t.abort("connection refused");
        assert!(t.validate().is_ok());
        assert_eq!(deserialize(&serialize(&t)).unwrap(), t);
    }

    #[test]
    fn qa_item_jsonl_shape() {
        let line = r#"{"question":"q?","golden_answers":["a","b"],"dataset_tag":"hotpotqa"}"#;
        let item: QaItem = decode_json(line.as_bytes()).unwrap();
        item.validate().unwrap();
        let t = item.start_trajectory("x", 5);
        assert_eq!(t.gold_answers(), vec!["a", "b"]);
        assert_eq!(t.dataset_tag.as_deref(), Some("hotpotqa"));

        let bad: QaItem = decode_json(br#"{"question":"q","golden_answers":[]}"#).unwrap();
        assert!(bad.validate().is_err());
    }
}
