//! Pipeline configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use iterag_core::audit::{LoggedModel, LoggedRetriever, RequestLog};
use iterag_core::coldstart::GenerationRun;
use iterag_core::eval::LoopConfig;
use iterag_core::gateway::{ChatClient, GenerationLog, PatternModel, ScriptedModel};
use iterag_core::http::RetryPolicy;
use iterag_core::policy::PolicyConfig;
use iterag_core::retrieval::{load_index, read_corpus, RemoteRetriever};
use iterag_core::reward::RewardConfig;
use iterag_core::{Bm25Params, Corpus, Error, LanguageModel, PromptBundle, Result, Retriever};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Canned outputs keyed by (question, turn).
    Scripted,
    /// Substring rules, for judges.
    Pattern,
    /// Chat-completion endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Script (scripted) or rules (pattern) file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    LocalBm25,
    RemoteDense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub mode: RetrieverKind,
    /// Prebuilt index file.
    pub index: Option<PathBuf>,
    /// Corpus JSONL, indexed in memory when no index is given.
    pub corpus: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub k1: f64,
    pub b: f64,
    /// Character cap on documents during `rl sample`.
    pub truncate_chars: usize,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self {
            mode: RetrieverKind::LocalBm25,
            index: None,
            corpus: None,
            endpoint: None,
            k1: p.k1,
            b: p.b,
            truncate_chars: 512,
        }
    }
}

impl RetrieverSection {
    pub fn params(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub retry: RetryPolicy,
    /// Concurrent requests per endpoint; defaults to the worker count.
    pub max_in_flight: Option<usize>,
    /// Append-only cache of policy generations.
    pub generation_log: Option<PathBuf>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub concurrency: usize,
    /// Directory of prompt template overrides.
    pub prompts_dir: Option<PathBuf>,
    pub policy: Option<ModelSpec>,
    pub judge: Option<ModelSpec>,
    pub retriever: RetrieverSection,
    pub reward: RewardConfig,
    #[serde(rename = "loop")]
    pub eval_loop: LoopConfig,
    pub generation: GenerationRun,
    pub optim: PolicyConfig,
    pub gateway: GatewaySection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            concurrency: 4,
            prompts_dir: None,
            policy: None,
            judge: None,
            retriever: RetrieverSection::default(),
            reward: RewardConfig::default(),
            eval_loop: LoopConfig::default(),
            generation: GenerationRun::default(),
            optim: PolicyConfig::default(),
            gateway: GatewaySection::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_iterations: Option<usize>,
    pub top_k: Option<usize>,
    pub strict: Option<bool>,
    pub concurrency: Option<usize>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    /// Load `path` (or defaults), resolve relative paths against the file's
    /// directory, apply overrides, and validate.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
                })?;
                let mut c: PipelineConfig = toml::from_str(&text)
                    .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
                let base = path.parent().unwrap_or(Path::new("."));
                c.resolve_paths(base);
                c
            }
            None => PipelineConfig::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.prompts_dir);
        resolve(base, &mut self.retriever.index);
        resolve(base, &mut self.retriever.corpus);
        resolve(base, &mut self.gateway.generation_log);
        for spec in [&mut self.policy, &mut self.judge].into_iter().flatten() {
            resolve(base, &mut spec.file);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(n) = o.max_iterations {
            self.eval_loop.max_iterations = n;
            self.generation.max_iterations = n;
        }
        if let Some(k) = o.top_k {
            self.eval_loop.top_k = k;
            self.generation.top_k = k;
        }
        if let Some(strict) = o.strict {
            self.eval_loop.strict = strict;
        }
        if let Some(c) = o.concurrency {
            self.concurrency = c;
        }
        self.generation.seed = Some(self.seed);
    }

    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::validation("concurrency must be positive"));
        }
        if self.gateway.max_in_flight == Some(0) {
            return Err(Error::validation("gateway.max_in_flight must be positive"));
        }
        self.reward.validate()?;
        self.eval_loop.validate()?;
        self.generation.validate()?;
        self.optim.validate()?;
        if self.retriever.truncate_chars == 0 {
            return Err(Error::validation("retriever.truncate_chars must be positive"));
        }
        if self.retriever.mode == RetrieverKind::RemoteDense && self.retriever.endpoint.is_none() {
            return Err(Error::validation("retriever.endpoint is required for remote_dense"));
        }
        for (name, spec) in [("policy", &self.policy), ("judge", &self.judge)] {
            if let Some(spec) = spec {
                validate_spec(name, spec)?;
            }
        }
        for path in [&self.prompts_dir, &self.retriever.index, &self.retriever.corpus]
            .into_iter()
            .flatten()
            .chain(self.policy.iter().chain(&self.judge).filter_map(|s| s.file.as_ref()))
        {
            if !path.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{}: not found", path.display()),
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective config.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn max_in_flight(&self) -> usize {
        self.gateway.max_in_flight.unwrap_or(self.concurrency)
    }

    pub fn prompts(&self) -> Result<PromptBundle> {
        match &self.prompts_dir {
            Some(dir) => PromptBundle::load_dir(dir),
            None => Ok(PromptBundle::default()),
        }
    }

    fn build_model(&self, name: &str, spec: &ModelSpec) -> Result<Box<dyn LanguageModel>> {
        Ok(match spec.kind {
            ModelKind::Scripted => Box::new(ScriptedModel::load(required(name, &spec.file)?)?),
            ModelKind::Pattern => Box::new(PatternModel::load(required(name, &spec.file)?)?),
            ModelKind::Http => {
                let url = spec.url.clone().ok_or_else(|| missing(name, "url"))?;
                let model = spec.model.clone().ok_or_else(|| missing(name, "model"))?;
                let key = spec.api_key_env.as_ref().and_then(|var| std::env::var(var).ok());
                Box::new(
                    ChatClient::new(url, model, self.gateway.retry.clone(), self.max_in_flight())
                        .with_api_key(key),
                )
            }
        })
    }

    /// The policy model, logged and optionally cached.
    pub fn policy(&self, log: &RequestLog) -> Result<Box<dyn LanguageModel>> {
        let spec = self
            .policy
            .as_ref()
            .ok_or_else(|| Error::usage("this command needs a [policy] section"))?;
        let mut model = self.build_model("policy", spec)?;
        if let Some(path) = &self.gateway.generation_log {
            model = Box::new(GenerationLog::open(model, path)?);
        }
        Ok(Box::new(LoggedModel::new(model, "policy", log.clone())))
    }

    pub fn judge(&self, log: &RequestLog) -> Result<Option<Box<dyn LanguageModel>>> {
        self.judge
            .as_ref()
            .map(|spec| {
                let model = self.build_model("judge", spec)?;
                Ok(Box::new(LoggedModel::new(model, "judge", log.clone())) as Box<dyn LanguageModel>)
            })
            .transpose()
    }

    pub fn retriever(&self, log: &RequestLog) -> Result<Box<dyn Retriever>> {
        let inner: Box<dyn Retriever> = match self.retriever.mode {
            RetrieverKind::RemoteDense => Box::new(RemoteRetriever::new(
                self.retriever.endpoint.clone().unwrap_or_default(),
                self.gateway.retry.clone(),
                self.max_in_flight(),
            )),
            RetrieverKind::LocalBm25 => Box::new(self.local_corpus()?),
        };
        Ok(Box::new(LoggedRetriever::new(inner, log.clone())))
    }

    fn local_corpus(&self) -> Result<Corpus> {
        let params = self.retriever.params();
        if let Some(index) = &self.retriever.index {
            return load_index(index, Some(params));
        }
        let corpus = self
            .retriever
            .corpus
            .as_ref()
            .ok_or_else(|| Error::usage("retriever needs `index` or `corpus`"))?;
        let file = std::fs::File::open(corpus)?;
        Corpus::build(read_corpus(std::io::BufReader::new(file))?, params)
    }

    /// True when every configured model is a local stub.
    pub fn deterministic(&self) -> bool {
        [&self.policy, &self.judge]
            .into_iter()
            .flatten()
            .all(|s| s.kind != ModelKind::Http)
            && self.retriever.mode == RetrieverKind::LocalBm25
    }
}

fn validate_spec(name: &str, spec: &ModelSpec) -> Result<()> {
    match spec.kind {
        ModelKind::Scripted | ModelKind::Pattern => required(name, &spec.file).map(|_| ()),
        ModelKind::Http => {
            spec.url.as_ref().ok_or_else(|| missing(name, "url"))?;
            spec.model.as_ref().ok_or_else(|| missing(name, "model"))?;
            Ok(())
        }
    }
}

fn required<'a>(name: &str, file: &'a Option<PathBuf>) -> Result<&'a Path> {
    file.as_deref().ok_or_else(|| missing(name, "file"))
}

fn missing(section: &str, key: &str) -> Error {
    Error::validation(format!("[{section}] needs `{key}`"))
}
