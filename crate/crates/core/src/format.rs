//! Prompt rendering and model-output parsing for the sectioned step format.
//!
//! A model turn must contain `The problem analysis:` followed by exactly one
//! of `The retrieval query:` or `The final answer:`. Prior steps are fed
//! back to the model as a numbered history block; see [`render_history`].

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Document, Step, StepKind};

pub const ANALYSIS_HEADER: &str = "The problem analysis:";
pub const QUERY_HEADER: &str = "The retrieval query:";
pub const ANSWER_HEADER: &str = "The final answer:";
pub const DOCUMENTS_HEADER: &str = "Retrieved documents:";
pub const NO_DOCUMENTS_MARKER: &str = "(no documents retrieved)";

const FIRST_TURN_TEMPLATE: &str = include_str!("../templates/first_turn.txt");
const FOLLOWUP_TEMPLATE: &str = include_str!("../templates/followup.txt");
const RELEVANCE_JUDGE_TEMPLATE: &str = include_str!("../templates/relevance_judge.txt");
const ANSWER_JUDGE_TEMPLATE: &str = include_str!("../templates/answer_judge.txt");
const BASELINE_TEMPLATE: &str = include_str!("../templates/baseline_rag.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatViolation {
    MissingAnalysis,
    NoPayload,
    BothPayloads,
    MultipleAnalyses,
}

impl FormatViolation {
    pub fn as_str(self) -> &'static str {
        match self {
            FormatViolation::MissingAnalysis => "missing_analysis",
            FormatViolation::NoPayload => "no_payload",
            FormatViolation::BothPayloads => "both_payloads",
            FormatViolation::MultipleAnalyses => "multiple_analyses",
        }
    }
}

impl std::fmt::Display for FormatViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    RetrievalQuery(String),
    FinalAnswer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedStep {
    pub analysis: String,
    pub payload: Payload,
}

impl ParsedStep {
    pub fn query(analysis: impl Into<String>, query: impl Into<String>) -> Self {
        Self {
            analysis: analysis.into(),
            payload: Payload::RetrievalQuery(query.into()),
        }
    }

    pub fn answer(analysis: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            analysis: analysis.into(),
            payload: Payload::FinalAnswer(answer.into()),
        }
    }

    /// The text a well-behaved model would emit for this step.
    pub fn render(&self) -> String {
        match &self.payload {
            Payload::RetrievalQuery(q) => format!("{ANALYSIS_HEADER} {}\n{QUERY_HEADER} {q}", self.analysis),
            Payload::FinalAnswer(a) => format!("{ANALYSIS_HEADER} {}\n{ANSWER_HEADER} {a}", self.analysis),
        }
    }

    pub fn into_step(self, raw: impl Into<String>) -> Step {
        let step = match self.payload {
            Payload::RetrievalQuery(q) => Step::query(self.analysis, q),
            Payload::FinalAnswer(a) => Step::answer(self.analysis, a),
        };
        step.with_raw(raw)
    }
}

/// Parse a model turn; violations are values so format rewards can score them.
pub fn parse_step(output: &str) -> std::result::Result<ParsedStep, FormatViolation> {
    let hits = find_headers(output);
    let analyses: Vec<&HeaderHit> = hits.iter().filter(|h| h.kind == HeaderKind::Analysis).collect();
    let query = hits.iter().position(|h| h.kind == HeaderKind::Query);
    let answer = hits.iter().position(|h| h.kind == HeaderKind::Answer);

    let analysis = match analyses.as_slice() {
        [] => return Err(FormatViolation::MissingAnalysis),
        [one] => *one,
        _ => return Err(FormatViolation::MultipleAnalyses),
    };
    let payload_idx = match (query, answer) {
        (Some(_), Some(_)) => return Err(FormatViolation::BothPayloads),
        (None, None) => return Err(FormatViolation::NoPayload),
        (Some(i), None) | (None, Some(i)) => i,
    };
    let payload = &hits[payload_idx];
    if payload.line_start < analysis.line_start {
        return Err(FormatViolation::MissingAnalysis);
    }

    let section = |hit: &HeaderHit| -> String {
        let end = hits
            .iter()
            .map(|h| h.line_start)
            .find(|&s| s > hit.line_start)
            .unwrap_or(output.len());
        output[hit.content_start..end].trim().to_owned()
    };
    let analysis_text = section(analysis);
    if analysis_text.is_empty() {
        return Err(FormatViolation::MissingAnalysis);
    }
    let payload_text = section(payload);
    if payload_text.is_empty() {
        return Err(FormatViolation::NoPayload);
    }
    Ok(match payload.kind {
        HeaderKind::Query => ParsedStep::query(analysis_text, payload_text),
        _ => ParsedStep::answer(analysis_text, payload_text),
    })
}

/// Parse a raw model turn straight into a [`Step`].
pub fn parse_into_step(output: &str) -> Step {
    match parse_step(output) {
        Ok(parsed) => parsed.into_step(output),
        Err(violation) => Step::invalid(output, violation),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeaderKind {
    Analysis,
    Query,
    Answer,
}

#[derive(Debug)]
struct HeaderHit {
    kind: HeaderKind,
    line_start: usize,
    content_start: usize,
}

fn find_headers(text: &str) -> Vec<HeaderHit> {
    let mut hits = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if let Some((kind, rel)) = match_header(line) {
            hits.push(HeaderHit {
                kind,
                line_start: offset,
                content_start: offset + rel,
            });
        }
        offset += line.len();
    }
    hits
}

fn is_marker(c: char) -> bool {
    matches!(c, '*' | '_' | '#' | '>' | '-' | '+') || c.is_whitespace()
}

/// Match one of the three headers at line start, allowing leading bullets
/// and bold/italic markers around the header text. Returns the byte offset
/// within `line` where the section content begins.
fn match_header(line: &str) -> Option<(HeaderKind, usize)> {
    let body = line.trim_start_matches(is_marker);
    let mut pos = line.len() - body.len();
    let candidates = [
        (HeaderKind::Analysis, "the problem analysis"),
        (HeaderKind::Query, "the retrieval query"),
        (HeaderKind::Answer, "the final answer"),
    ];
    for (kind, words) in candidates {
        let Some(prefix) = body.get(..words.len()) else {
            continue;
        };
        if !prefix.eq_ignore_ascii_case(words) {
            continue;
        }
        pos += words.len();
        let rest = &line[pos..];
        let after_markers = rest.trim_start_matches(['*', '_']);
        let after_colon = after_markers.strip_prefix(':')?;
        let content = after_colon.trim_start_matches(['*', '_']);
        return Some((kind, line.len() - content.len()));
    }
    None
}

/// Output-side rendering of a step without documents: the analysis plus
/// either its query or its answer.
pub fn render_step_output(step: &Step) -> String {
    match step.kind {
        StepKind::Query => format!(
            "{ANALYSIS_HEADER} {}\n{QUERY_HEADER} {}",
            step.analysis,
            step.query.as_deref().unwrap_or_default()
        ),
        StepKind::Answer => format!(
            "{ANALYSIS_HEADER} {}\n{ANSWER_HEADER} {}",
            step.analysis,
            step.answer.as_deref().unwrap_or_default()
        ),
        StepKind::Invalid => step.raw.clone(),
    }
}

/// Numbered document blocks, each preceded by a newline.
pub fn render_documents(documents: &[Document]) -> String {
    if documents.is_empty() {
        return format!("\n{NO_DOCUMENTS_MARKER}");
    }
    let mut out = String::new();
    for (i, doc) in documents.iter().enumerate() {
        let _ = write!(out, "\n[Document {}] Title: {}\n{}", i + 1, doc.title, doc.body);
    }
    out
}

/// One history block: `\nStep n:\n<analysis + query>\nRetrieved documents:<docs>`.
fn render_history_block(index: usize, step: &Step) -> String {
    let mut out = format!("\nStep {index}:\n{}", render_step_output(step));
    if step.kind == StepKind::Query {
        out.push('\n');
        out.push_str(DOCUMENTS_HEADER);
        out.push_str(&render_documents(&step.documents));
    }
    out
}

/// Serialize prior steps, documents included. Each block starts with a
/// newline so `render_history(s[..k])` is a prefix of `render_history(s)`.
pub fn render_history(steps: &[Step]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| render_history_block(i + 1, s))
        .collect()
}

/// Inverse of [`render_history`]. Document ids are not part of the rendered
/// form, so recovered documents carry their 1-based position as id.
pub fn parse_history(text: &str) -> Result<Vec<Step>> {
    let lines: Vec<&str> = text.split('\n').collect();
    let mut starts = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if *line == format!("Step {}:", starts.len() + 1) {
            starts.push(i);
        }
    }
    if starts.is_empty() {
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        return Err(Error::parse("history", "no step blocks found"));
    }
    if lines[..starts[0]].iter().any(|l| !l.trim().is_empty()) {
        return Err(Error::parse("history", "text before the first step block"));
    }
    let mut steps = Vec::with_capacity(starts.len());
    for (n, &start) in starts.iter().enumerate() {
        let end = starts.get(n + 1).copied().unwrap_or(lines.len());
        steps.push(parse_history_block(n + 1, &lines[start + 1..end])?);
    }
    Ok(steps)
}

fn parse_history_block(index: usize, lines: &[&str]) -> Result<Step> {
    let field = format!("history.step[{index}]");
    let docs_at = lines.iter().position(|l| *l == DOCUMENTS_HEADER);
    let head = lines[..docs_at.unwrap_or(lines.len())].join("\n");
    let parsed = match parse_step(&head) {
        Ok(p) => p,
        Err(v) => return Ok(Step::invalid(head, v)),
    };
    let Some(docs_at) = docs_at else {
        return match parsed.payload {
            Payload::FinalAnswer(_) => Ok(parsed.into_step(head)),
            Payload::RetrievalQuery(_) => Err(Error::parse(field, "query step without a documents section")),
        };
    };
    if matches!(parsed.payload, Payload::FinalAnswer(_)) {
        return Err(Error::parse(field, "answer step with a documents section"));
    }
    let documents = parse_document_lines(&lines[docs_at + 1..], &field)?;
    Ok(parsed.into_step(head).with_documents(documents))
}

fn parse_document_lines(lines: &[&str], field: &str) -> Result<Vec<Document>> {
    if lines == [NO_DOCUMENTS_MARKER] {
        return Ok(Vec::new());
    }
    let mut docs: Vec<Document> = Vec::new();
    let mut body: Vec<&str> = Vec::new();
    for line in lines {
        let header = format!("[Document {}] Title: ", docs.len() + 1);
        if let Some(title) = line.strip_prefix(header.as_str()) {
            if let Some(last) = docs.last_mut() {
                last.body = body.join("\n");
            }
            body.clear();
            docs.push(Document::new((docs.len() + 1).to_string(), title, ""));
        } else if docs.is_empty() {
            return Err(Error::parse(field, format!("unexpected line in documents section: {line:?}")));
        } else {
            body.push(line);
        }
    }
    match docs.last_mut() {
        Some(last) => last.body = body.join("\n"),
        None => return Err(Error::parse(field, "empty documents section")),
    }
    Ok(docs)
}

/// Single-pass `{name}` substitution; inserted values are never rescanned,
/// and unknown `{...}` sequences are copied through.
pub fn fill_template(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let matched = slots.iter().find(|(name, _)| {
            tail.len() > name.len() + 1
                && tail[1..].starts_with(name)
                && tail[1 + name.len()..].starts_with('}')
        });
        match matched {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// The prompt templates used by the loop and the judges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub first_turn: String,
    pub followup: String,
    pub relevance_judge: String,
    pub answer_judge: String,
    pub baseline: String,
}

impl Default for PromptBundle {
    fn default() -> Self {
        Self {
            first_turn: FIRST_TURN_TEMPLATE.to_owned(),
            followup: FOLLOWUP_TEMPLATE.to_owned(),
            relevance_judge: RELEVANCE_JUDGE_TEMPLATE.to_owned(),
            answer_judge: ANSWER_JUDGE_TEMPLATE.to_owned(),
            baseline: BASELINE_TEMPLATE.to_owned(),
        }
    }
}

impl PromptBundle {
    /// File names looked up by [`PromptBundle::load_dir`].
    pub const FILES: [&'static str; 5] = [
        "first_turn.txt",
        "followup.txt",
        "relevance_judge.txt",
        "answer_judge.txt",
        "baseline_rag.txt",
    ];

    /// Load templates from a directory; files that are absent keep the
    /// shipped default.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut bundle = Self::default();
        let slots = [
            &mut bundle.first_turn,
            &mut bundle.followup,
            &mut bundle.relevance_judge,
            &mut bundle.answer_judge,
            &mut bundle.baseline,
        ];
        for (name, slot) in Self::FILES.iter().zip(slots) {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)?;
            }
        }
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let required: [(&str, &str, &[&str]); 5] = [
            ("first_turn", &self.first_turn, &["question"]),
            ("followup", &self.followup, &["question", "steps_formatted"]),
            ("relevance_judge", &self.relevance_judge, &["question", "documents"]),
            ("answer_judge", &self.answer_judge, &["question", "prediction", "gold"]),
            ("baseline", &self.baseline, &["question", "documents"]),
        ];
        for (name, template, slots) in required {
            for slot in slots {
                if !template.contains(&format!("{{{slot}}}")) {
                    return Err(Error::validation(format!(
                        "template {name} lacks placeholder {{{slot}}}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn render_first_prompt(&self, question: &str) -> Result<String> {
        if question.trim().is_empty() {
            return Err(Error::usage("question must be nonempty"));
        }
        Ok(fill_template(&self.first_turn, &[("question", question)]))
    }

    pub fn render_followup_prompt(&self, question: &str, prior_steps: &[Step]) -> Result<String> {
        if question.trim().is_empty() {
            return Err(Error::usage("question must be nonempty"));
        }
        if prior_steps.is_empty() {
            return Err(Error::usage(
                "follow-up prompt needs prior steps; use the first-turn prompt",
            ));
        }
        if prior_steps.iter().any(Step::is_terminal) {
            return Err(Error::usage("prior steps must all be retrieval steps"));
        }
        let history = render_history(prior_steps);
        Ok(fill_template(
            &self.followup,
            &[("question", question), ("steps_formatted", &history)],
        ))
    }

    /// First-turn prompt for an empty history, follow-up otherwise.
    pub fn render_turn_prompt(&self, question: &str, prior_steps: &[Step]) -> Result<String> {
        if prior_steps.is_empty() {
            self.render_first_prompt(question)
        } else {
            self.render_followup_prompt(question, prior_steps)
        }
    }

    pub fn render_relevance_prompt(&self, question: &str, documents: &[Document]) -> String {
        fill_template(
            &self.relevance_judge,
            &[("question", question), ("documents", &render_documents(documents))],
        )
    }

    pub fn render_answer_judge_prompt(&self, question: &str, prediction: &str, gold: &str) -> String {
        fill_template(
            &self.answer_judge,
            &[("question", question), ("prediction", prediction), ("gold", gold)],
        )
    }

    pub fn render_baseline_prompt(&self, question: &str, documents: &[Document]) -> String {
        fill_template(
            &self.baseline,
            &[("question", question), ("documents", &render_documents(documents))],
        )
    }
}
