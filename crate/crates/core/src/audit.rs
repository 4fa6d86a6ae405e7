//! Request logging for models and retrievers, used to audit loop limits.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gateway::{Completion, CompletionRequest, LanguageModel};
use crate::model::Document;
use crate::retrieval::Retriever;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Model {
        channel: String,
        question: String,
        turn: usize,
        prompt_chars: usize,
        ok: bool,
    },
    Retrieval {
        query: String,
        top_k: usize,
        returned: usize,
        ok: bool,
    },
}

/// Shared, append-only in-memory request log.
#[derive(Debug, Clone, Default)]
pub struct RequestLog {
    entries: Arc<Mutex<Vec<LogEntry>>>,
}

impl RequestLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, entry: LogEntry) {
        self.entries.lock().expect("request log poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.entries.lock().expect("request log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("request log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Model calls on `channel` grouped by question.
    pub fn model_calls_per_question(&self, channel: &str) -> std::collections::BTreeMap<String, usize> {
        let mut out = std::collections::BTreeMap::new();
        for e in self.entries() {
            if let LogEntry::Model { channel: c, question, .. } = e {
                if c == channel {
                    *out.entry(question).or_insert(0) += 1;
                }
            }
        }
        out
    }
}

pub struct LoggedModel<M> {
    inner: M,
    channel: String,
    log: RequestLog,
}

impl<M> LoggedModel<M> {
    pub fn new(inner: M, channel: impl Into<String>, log: RequestLog) -> Self {
        Self {
            inner,
            channel: channel.into(),
            log,
        }
    }
}

impl<M: LanguageModel> LanguageModel for LoggedModel<M> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let result = self.inner.complete(request);
        self.log.push(LogEntry::Model {
            channel: self.channel.clone(),
            question: request.question.clone(),
            turn: request.turn,
            prompt_chars: request.prompt.chars().count(),
            ok: result.is_ok(),
        });
        result
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

pub struct LoggedRetriever<R> {
    inner: R,
    log: RequestLog,
}

impl<R> LoggedRetriever<R> {
    pub fn new(inner: R, log: RequestLog) -> Self {
        Self { inner, log }
    }
}

impl<R: Retriever> Retriever for LoggedRetriever<R> {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>> {
        let result = self.inner.retrieve(query, top_k);
        self.log.push(LogEntry::Retrieval {
            query: query.to_owned(),
            top_k,
            returned: result.as_ref().map_or(0, Vec::len),
            ok: result.is_ok(),
        });
        result
    }
}
