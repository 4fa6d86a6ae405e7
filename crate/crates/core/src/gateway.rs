//! Access to language models: an HTTP chat-completion client, deterministic
//! scripted stand-ins for tests and dry runs, and a content-addressed
//! generation log that makes long runs resumable.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::http::{JsonClient, RetryPolicy};
use crate::model::decode_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::validation("temperature must be finite and non-negative"));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::validation("max_output_tokens must be positive"));
        }
        Ok(())
    }

    /// Parameters used for judge calls.
    pub fn judge() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 64,
            seed: None,
        }
    }
}

/// One generation request. `question` and `turn` identify the call for
/// scripted models; HTTP models only look at `prompt` and `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub question: String,
    /// 1-based loop turn; 0 for judge calls.
    pub turn: usize,
    pub params: GenerationParams,
}

impl CompletionRequest {
    pub fn judge(prompt: String, question: &str) -> Self {
        Self {
            prompt,
            question: question.to_owned(),
            turn: 0,
            params: GenerationParams::judge(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    /// Token usage reported by the endpoint, if any.
    pub usage_tokens: Option<u64>,
}

impl Completion {
    pub fn local(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            attempts: 1,
            usage_tokens: None,
        }
    }
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion>;

    /// Whether identical requests always yield identical outputs.
    fn is_deterministic(&self) -> bool {
        false
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        (**self).complete(request)
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        (**self).complete(request)
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

/// Canned outputs keyed by (question, turn), with a fallback.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptedModel {
    script: BTreeMap<(String, usize), String>,
    default_output: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    default_output: String,
    #[serde(default)]
    entries: Vec<ScriptEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptEntry {
    question: String,
    turn: usize,
    output: String,
}

impl ScriptedModel {
    pub fn new(default_output: impl Into<String>) -> Self {
        Self {
            script: BTreeMap::new(),
            default_output: default_output.into(),
        }
    }

    pub fn with(mut self, question: impl Into<String>, turn: usize, output: impl Into<String>) -> Self {
        self.insert(question, turn, output);
        self
    }

    pub fn insert(&mut self, question: impl Into<String>, turn: usize, output: impl Into<String>) {
        self.script.insert((question.into(), turn), output.into());
    }

    /// Register `outputs` as turns 1, 2, ... for `question`.
    pub fn with_turns<S: Into<String>>(mut self, question: &str, outputs: impl IntoIterator<Item = S>) -> Self {
        for (i, out) in outputs.into_iter().enumerate() {
            self.insert(question, i + 1, out);
        }
        self
    }

    pub fn scripted_complete(&self, question: &str, turn: usize) -> &str {
        self.script
            .get(&(question.to_owned(), turn))
            .unwrap_or(&self.default_output)
    }

    /// JSON: `{"default_output": "...", "entries": [{"question", "turn", "output"}]}`.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: ScriptFile = decode_json(bytes)?;
        let mut model = Self::new(file.default_output);
        for e in file.entries {
            model.insert(e.question, e.turn, e.output);
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = ScriptFile {
            default_output: self.default_output.clone(),
            entries: self
                .script
                .iter()
                .map(|((q, t), o)| ScriptEntry {
                    question: q.clone(),
                    turn: *t,
                    output: o.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("script serialization is infallible")
    }
}

impl LanguageModel for ScriptedModel {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        Ok(Completion::local(self.scripted_complete(&request.question, request.turn)))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Replies chosen by substring rules over the prompt; the first rule whose
/// needles all occur wins. Used as a scripted judge.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatternModel {
    #[serde(default)]
    pub rules: Vec<PatternRule>,
    #[serde(default)]
    pub default_output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRule {
    pub contains: Vec<String>,
    pub output: String,
}

impl PatternModel {
    pub fn new(default_output: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_output: default_output.into(),
        }
    }

    pub fn rule<S: Into<String>>(mut self, contains: impl IntoIterator<Item = S>, output: impl Into<String>) -> Self {
        self.rules.push(PatternRule {
            contains: contains.into_iter().map(Into::into).collect(),
            output: output.into(),
        });
        self
    }

    pub fn reply(&self, prompt: &str) -> &str {
        self.rules
            .iter()
            .find(|r| r.contains.iter().all(|needle| prompt.contains(needle.as_str())))
            .map_or(self.default_output.as_str(), |r| r.output.as_str())
    }

    pub fn load(path: &Path) -> Result<Self> {
        decode_json(&std::fs::read(path)?)
    }
}

impl LanguageModel for PatternModel {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        Ok(Completion::local(self.reply(&request.prompt)))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Wraps a closure; convenient for stubs in tests.
pub struct FnModel<F>(pub F);

impl<F> LanguageModel for FnModel<F>
where
    F: Fn(&CompletionRequest) -> Result<String> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        (self.0)(request).map(Completion::local)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChatMessage {
    role: String,
    content: String,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    #[serde(default)]
    total_tokens: Option<u64>,
}

/// Chat-completion endpoint client (`messages` in, `choices[0].message` out).
pub struct ChatClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: JsonClient,
}

impl ChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            client: JsonClient::new(retry, max_in_flight),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key.filter(|k| !k.is_empty());
        self
    }
}

impl LanguageModel for ChatClient {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user".into(),
                content: request.prompt.clone(),
            }],
            temperature: request.params.temperature,
            max_tokens: request.params.max_output_tokens,
            seed: request.params.seed,
        };
        let response = self.client.post(&self.endpoint, self.api_key.as_deref(), &body)?;
        let parsed: ChatResponse = decode_json(response.body.as_bytes())
            .map_err(|e| Error::Protocol(format!("malformed chat response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Protocol("chat response has no choices".into()))?;
        Ok(Completion {
            text: choice.message.content,
            attempts: response.attempts,
            usage_tokens: parsed.usage.and_then(|u| u.total_tokens),
        })
    }
}

/// Content hash identifying a generation request.
pub fn request_key(request: &CompletionRequest) -> String {
    let canonical = serde_json::to_vec(&(
        &request.prompt,
        &request.question,
        request.turn,
        request.params.temperature.to_bits(),
        request.params.max_output_tokens,
        request.params.seed,
    ))
    .expect("request key serialization is infallible");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRecord {
    key: String,
    turn: usize,
    question: String,
    completion: Completion,
}

/// Append-only JSONL log of generations keyed by [`request_key`]. A request
/// already present in the log is answered from it without calling the model.
pub struct GenerationLog<M> {
    inner: M,
    path: PathBuf,
    cache: Mutex<HashMap<String, Completion>>,
    writer: Mutex<File>,
}

impl<M: LanguageModel> GenerationLog<M> {
    pub fn open(inner: M, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut cache = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                // a torn final line from an interrupted run is skipped
                if let Ok(record) = serde_json::from_str::<LogRecord>(&line) {
                    cache.insert(record.key, record.completion);
                }
            }
        }
        let mut writer = OpenOptions::new().create(true).append(true).open(&path)?;
        let len = writer.metadata()?.len();
        if len > 0 {
            let bytes = std::fs::read(&path)?;
            if bytes.last() != Some(&b'\n') {
                writer.write_all(b"\n")?;
            }
        }
        Ok(Self {
            inner,
            path,
            cache: Mutex::new(cache),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("log poisoned").len()
    }
}

impl<M: LanguageModel> LanguageModel for GenerationLog<M> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let key = request_key(request);
        if let Some(hit) = self.cache.lock().expect("log poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let completion = self.inner.complete(request)?;
        let record = LogRecord {
            key: key.clone(),
            turn: request.turn,
            question: request.question.clone(),
            completion: completion.clone(),
        };
        let mut line = serde_json::to_vec(&record).map_err(std::io::Error::from)?;
        line.push(b'\n');
        {
            let mut writer = self.writer.lock().expect("log poisoned");
            writer.write_all(&line)?;
            writer.flush()?;
        }
        self.cache.lock().expect("log poisoned").insert(key, completion.clone());
        Ok(completion)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}
