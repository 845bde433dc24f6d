//! Language and encoder capabilities behind narrow traits.
//!
//! The engine only ever sees raw reply text (or embedding vectors) and parses
//! it itself, so a recorded transcript fully determines engine behavior.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::types::ImageRef;

pub const INSIGHT_PROMPT: &str = include_str!("../assets/prompts/insight.txt");
pub const DEBATE_ROLE_PROMPT: &str = include_str!("../assets/prompts/debate_role.txt");
pub const DEBATE_ACTION_PROMPT: &str = include_str!("../assets/prompts/debate_action.txt");
pub const PROFILE_OPERATION_PROMPT: &str = include_str!("../assets/prompts/profile_operation.txt");
pub const DESCRIBE_PROMPT: &str = include_str!("../assets/prompts/describe.txt");
pub const REFINE_PROMPT: &str = include_str!("../assets/prompts/refine.txt");

/// Debate role that answers `generate_groups` with a grouping.
pub const GROUPER_ROLE: &str = "grouper";

/// Replaces `{name}` placeholders; unknown placeholders are left untouched.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in values {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub degradation_type: String,
    /// `"<n>: <text>"` summaries, numbered from 1.
    pub new_patterns: Vec<String>,
    /// `"<exp_id>: <text>"` summaries.
    pub existing_patterns: Vec<String>,
    pub history_plan: String,
    pub history_feedback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "capability", rename_all = "snake_case")]
pub enum OracleRequest {
    DistillInsight {
        prompt: String,
    },
    Describe {
        image: ImageRef,
        degradation_type: String,
    },
    DebateTurn {
        role: String,
        context: String,
        image_context: String,
    },
    RefineChoice {
        image: ImageRef,
        candidates: Vec<String>,
    },
    ProposePlan(PlanRequest),
    Embed {
        image: ImageRef,
    },
}

impl OracleRequest {
    pub fn capability(&self) -> &'static str {
        match self {
            OracleRequest::DistillInsight { .. } => "distill_insight",
            OracleRequest::Describe { .. } => "describe",
            OracleRequest::DebateTurn { .. } => "debate_turn",
            OracleRequest::RefineChoice { .. } => "refine_choice",
            OracleRequest::ProposePlan(_) => "propose_plan",
            OracleRequest::Embed { .. } => "embed",
        }
    }

    /// Prompt text sent to a chat backend for this request.
    pub fn prompt(&self) -> String {
        match self {
            OracleRequest::DistillInsight { prompt } => prompt.clone(),
            OracleRequest::Describe {
                image,
                degradation_type,
            } => render(
                DESCRIBE_PROMPT,
                &[("image", image.as_str()), ("degradation_type", degradation_type)],
            ),
            OracleRequest::DebateTurn {
                role,
                context,
                image_context,
            } if role == GROUPER_ROLE => render(
                DEBATE_ACTION_PROMPT,
                &[
                    ("pattern_textual_context", context),
                    ("pattern_image_context", image_context),
                ],
            ),
            OracleRequest::DebateTurn { role, context, .. } => {
                render(DEBATE_ROLE_PROMPT, &[("role", role), ("context", context)])
            }
            OracleRequest::RefineChoice { image, candidates } => {
                let listing: Vec<String> = candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| format!("{}. {c}", i + 1))
                    .collect();
                render(
                    REFINE_PROMPT,
                    &[
                        ("image", image.as_str()),
                        ("count", &candidates.len().to_string()),
                        ("candidates", &listing.join("\n")),
                    ],
                )
            }
            OracleRequest::ProposePlan(p) => render(
                PROFILE_OPERATION_PROMPT,
                &[
                    ("degradation_type", &p.degradation_type),
                    ("new_pattern", &p.new_patterns.join("\n")),
                    ("pattern_db", &p.existing_patterns.join("\n")),
                    ("history_plan", &p.history_plan),
                    ("history_feedback", &p.history_feedback),
                ],
            ),
            OracleRequest::Embed { image } => image.as_str().to_string(),
        }
    }
}

pub trait LanguageOracle: Send + Sync {
    fn complete(&self, request: &OracleRequest) -> Result<String>;

    fn distill_insight(&self, prompt: &str) -> Result<String> {
        self.complete(&OracleRequest::DistillInsight {
            prompt: prompt.to_string(),
        })
    }

    fn describe(&self, image: &ImageRef, degradation_type: &str) -> Result<String> {
        self.complete(&OracleRequest::Describe {
            image: image.clone(),
            degradation_type: degradation_type.to_string(),
        })
    }

    fn debate_turn(&self, role: &str, context: &str, image_context: &str) -> Result<String> {
        self.complete(&OracleRequest::DebateTurn {
            role: role.to_string(),
            context: context.to_string(),
            image_context: image_context.to_string(),
        })
    }

    fn refine_choice(&self, candidates: &[String], image: &ImageRef) -> Result<String> {
        self.complete(&OracleRequest::RefineChoice {
            image: image.clone(),
            candidates: candidates.to_vec(),
        })
    }

    fn propose_plan(&self, request: &PlanRequest) -> Result<String> {
        self.complete(&OracleRequest::ProposePlan(request.clone()))
    }
}

pub trait EncoderOracle: Send + Sync {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>>;
}

impl<T: LanguageOracle + ?Sized> LanguageOracle for Arc<T> {
    fn complete(&self, request: &OracleRequest) -> Result<String> {
        (**self).complete(request)
    }
}

impl<T: EncoderOracle + ?Sized> EncoderOracle for Arc<T> {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>> {
        (**self).embed(image)
    }
}

// ---------------------------------------------------------------------------
// Transcript

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub capability: String,
    pub request: OracleRequest,
    /// Reply text; embeddings are stored as a JSON array.
    pub reply: Option<String>,
    /// Failure message when the call errored.
    pub error: Option<String>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TranscriptFile {
    schema: u64,
    entries: Vec<TranscriptEntry>,
}

/// Append-only call log shared by recording wrappers.
#[derive(Debug, Default)]
pub struct Transcript {
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl Transcript {
    pub fn new() -> Arc<Self> {
        Arc::new(Transcript::default())
    }

    pub fn append(&self, entry: TranscriptEntry) {
        self.entries.lock().expect("transcript lock").push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("transcript lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("transcript lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TranscriptFile {
            schema: 1,
            entries: self.entries(),
        };
        let text = serde_json::to_string_pretty(&file).expect("transcript serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vec<TranscriptEntry>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))?;
        let found = value.get("schema").and_then(Value::as_u64).unwrap_or(0);
        if found != 1 {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found,
                expected: 1,
            });
        }
        let file: TranscriptFile = serde_json::from_value(value).map_err(|e| Error::parse(path, &e))?;
        Ok(file.entries)
    }
}

/// Wraps an oracle and logs every call into a shared transcript.
pub struct Recording<T> {
    inner: T,
    transcript: Arc<Transcript>,
}

impl<T> Recording<T> {
    pub fn new(inner: T, transcript: Arc<Transcript>) -> Self {
        Recording { inner, transcript }
    }

    fn log<R>(&self, request: OracleRequest, started: Instant, result: &Result<R>, reply: Option<String>) {
        self.transcript.append(TranscriptEntry {
            capability: request.capability().to_string(),
            request,
            reply,
            error: result.as_ref().err().map(ToString::to_string),
            latency_ms: started.elapsed().as_millis() as u64,
        });
    }
}

impl<T: LanguageOracle> LanguageOracle for Recording<T> {
    fn complete(&self, request: &OracleRequest) -> Result<String> {
        let started = Instant::now();
        let result = self.inner.complete(request);
        self.log(request.clone(), started, &result, result.as_ref().ok().cloned());
        result
    }
}

impl<T: EncoderOracle> EncoderOracle for Recording<T> {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>> {
        let started = Instant::now();
        let result = self.inner.embed(image);
        let reply = result
            .as_ref()
            .ok()
            .map(|v| serde_json::to_string(v).expect("finite embedding"));
        self.log(OracleRequest::Embed { image: image.clone() }, started, &result, reply);
        result
    }
}

/// Answers calls from a recorded transcript. Each entry is consumed once;
/// lookup is by request content, so concurrent callers replay correctly.
pub struct Replay {
    entries: Mutex<Vec<Option<TranscriptEntry>>>,
}

impl Replay {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        Replay {
            entries: Mutex::new(entries.into_iter().map(Some).collect()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().expect("replay lock").iter().flatten().count()
    }

    fn take(&self, request: &OracleRequest) -> Result<TranscriptEntry> {
        let mut entries = self.entries.lock().expect("replay lock");
        let slot = entries
            .iter_mut()
            .find(|e| e.as_ref().is_some_and(|e| &e.request == request))
            .ok_or_else(|| {
                Error::OracleProtocol(format!(
                    "no recorded `{}` call matches the request",
                    request.capability()
                ))
            })?;
        Ok(slot.take().expect("matched entry"))
    }
}

fn replayed_reply(entry: TranscriptEntry) -> Result<String> {
    match (entry.reply, entry.error) {
        (Some(reply), _) => Ok(reply),
        (None, Some(err)) => Err(Error::OracleUnavailable(format!("recorded failure: {err}"))),
        (None, None) => Err(Error::OracleProtocol("recorded entry has no reply".into())),
    }
}

impl LanguageOracle for Replay {
    fn complete(&self, request: &OracleRequest) -> Result<String> {
        replayed_reply(self.take(request)?)
    }
}

impl EncoderOracle for Replay {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>> {
        let reply = replayed_reply(self.take(&OracleRequest::Embed { image: image.clone() })?)?;
        serde_json::from_str(&reply).map_err(|e| Error::OracleProtocol(format!("recorded embedding: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Remote chat-completion backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL; `/chat/completions` and `/embeddings` are appended.
    pub endpoint: String,
    pub model: String,
    /// Per-capability model override, keyed by capability name.
    #[serde(default)]
    pub model_overrides: BTreeMap<String, String>,
    pub embedding_model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://localhost:8000/v1".into(),
            model: "qwen3-vl-flash".into(),
            model_overrides: BTreeMap::new(),
            embedding_model: "clip".into(),
            api_key_env: "EXPOOL_API_KEY".into(),
            timeout_secs: 60,
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug)]
pub enum TransportError {
    /// Connection refused, reset, timed out, and the like.
    Connection(String),
}

/// One HTTP POST with a JSON body; returns (status, body).
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, bearer: &str, body: &Value) -> std::result::Result<(u16, String), TransportError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::ConfigError(format!("http client: {e}")))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, bearer: &str, body: &Value) -> std::result::Result<(u16, String), TransportError> {
        let response = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| TransportError::Connection(e.to_string()))?;
        Ok((status, text))
    }
}

pub struct RemoteOracle {
    config: RemoteConfig,
    api_key: String,
    transport: Box<dyn Transport>,
    attempts: AtomicU64,
}

impl RemoteOracle {
    /// Reads the credential from `config.api_key_env` and uses HTTP transport.
    pub fn from_env(config: RemoteConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| Error::ConfigError(format!("environment variable {} is not set", config.api_key_env)))?;
        let transport = HttpTransport::new(Duration::from_secs(config.timeout_secs))?;
        Ok(Self::with_transport(config, api_key, Box::new(transport)))
    }

    pub fn with_transport(config: RemoteConfig, api_key: String, transport: Box<dyn Transport>) -> Self {
        RemoteOracle {
            config,
            api_key,
            transport,
            attempts: AtomicU64::new(0),
        }
    }

    /// Total HTTP attempts made, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn model_for(&self, capability: &str) -> &str {
        self.config
            .model_overrides
            .get(capability)
            .map_or(self.config.model.as_str(), String::as_str)
    }

    fn post_with_retry(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{path}", self.config.endpoint.trim_end_matches('/'));
        let attempts = self.config.max_attempts.max(1);
        let mut last_failure = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(wait));
            }
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match self.transport.post(&url, &self.api_key, body) {
                Ok((status, text)) if (200..300).contains(&status) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| Error::OracleProtocol(format!("response is not JSON: {e}")));
                }
                Ok((401 | 403, _)) => {
                    return Err(Error::ConfigError(format!("{url} rejected the credential")));
                }
                Ok((status, text)) if status == 429 || status >= 500 => {
                    last_failure = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
                }
                Ok((status, text)) => {
                    return Err(Error::OracleProtocol(format!(
                        "HTTP {status}: {}",
                        text.chars().take(200).collect::<String>()
                    )));
                }
                Err(TransportError::Connection(msg)) => last_failure = msg,
            }
            log::warn!("attempt {} of {attempts} to {url} failed: {last_failure}", attempt + 1);
        }
        Err(Error::OracleUnavailable(format!(
            "{url} failed after {attempts} attempts: {last_failure}"
        )))
    }
}

impl LanguageOracle for RemoteOracle {
    fn complete(&self, request: &OracleRequest) -> Result<String> {
        let body = json!({
            "model": self.model_for(request.capability()),
            "temperature": 0,
            "messages": [{"role": "user", "content": request.prompt()}],
        });
        let response = self.post_with_retry("chat/completions", &body)?;
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::OracleProtocol("reply has no choices[0].message.content".into()))
    }
}

impl EncoderOracle for RemoteOracle {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>> {
        let body = json!({"model": self.config.embedding_model, "input": image.as_str()});
        let response = self.post_with_retry("embeddings", &body)?;
        let vector: Vec<f64> = response
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::OracleProtocol("reply has no data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::OracleProtocol("embedding has non-numeric entries".into()))?;
        Ok(vector)
    }
}

// ---------------------------------------------------------------------------
// Reply parsing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MetaOperation {
    Add { source: usize },
    Merge { source: usize, target: u64 },
    Replace { source: usize, target: u64 },
    Update { source: usize, target: u64 },
    Delete { source: usize, target: u64 },
}

impl MetaOperation {
    pub fn source(&self) -> usize {
        match *self {
            MetaOperation::Add { source }
            | MetaOperation::Merge { source, .. }
            | MetaOperation::Replace { source, .. }
            | MetaOperation::Update { source, .. }
            | MetaOperation::Delete { source, .. } => source,
        }
    }

    pub fn target(&self) -> Option<u64> {
        match *self {
            MetaOperation::Add { .. } => None,
            MetaOperation::Merge { target, .. }
            | MetaOperation::Replace { target, .. }
            | MetaOperation::Update { target, .. }
            | MetaOperation::Delete { target, .. } => Some(target),
        }
    }

    pub fn to_line(&self) -> String {
        let name = match self {
            MetaOperation::Add { .. } => "add",
            MetaOperation::Merge { .. } => "merge",
            MetaOperation::Replace { .. } => "replace",
            MetaOperation::Update { .. } => "update",
            MetaOperation::Delete { .. } => "delete",
        };
        match self.target() {
            Some(t) => format!("{} | {name} | {t}", self.source()),
            None => format!("{} | {name}", self.source()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedPlan {
    pub operations: Vec<MetaOperation>,
    /// One message per rejected line.
    pub diagnostics: Vec<String>,
}

fn parse_plan_line(line: &str) -> std::result::Result<MetaOperation, String> {
    let fields: Vec<&str> = line.split('|').map(str::trim).collect();
    if fields.len() < 2 || fields.len() > 3 {
        return Err(format!("expected 2 or 3 `|`-separated fields in `{line}`"));
    }
    let source: usize = fields[0]
        .parse()
        .map_err(|_| format!("new pattern `{}` is not a number", fields[0]))?;
    let target = match fields.get(2).filter(|f| !f.is_empty()) {
        Some(t) => Some(t.parse::<u64>().map_err(|_| format!("existing pattern `{t}` is not a number"))?),
        None => None,
    };
    let need = |t: Option<u64>| t.ok_or_else(|| format!("`{}` requires an existing pattern", fields[1]));
    match fields[1].to_ascii_lowercase().as_str() {
        "add" => Ok(MetaOperation::Add { source }),
        "merge" => Ok(MetaOperation::Merge {
            source,
            target: need(target)?,
        }),
        "replace" => Ok(MetaOperation::Replace {
            source,
            target: need(target)?,
        }),
        "update" => Ok(MetaOperation::Update {
            source,
            target: need(target)?,
        }),
        "delete" => Ok(MetaOperation::Delete {
            source,
            target: need(target)?,
        }),
        other => Err(format!("unknown action `{other}`")),
    }
}

/// Tolerant parser for `"<new> | <action> | <existing>"` lines, either bare or
/// wrapped in a JSON list of strings.
pub fn parse_plan_lines(reply: &str) -> ParsedPlan {
    let trimmed = reply.trim();
    let lines: Vec<String> = match (trimmed.find('['), trimmed.rfind(']')) {
        (Some(a), Some(b)) if a < b => match serde_json::from_str::<Vec<String>>(&trimmed[a..=b]) {
            Ok(list) => list,
            Err(_) => trimmed.lines().map(str::to_string).collect(),
        },
        _ => trimmed.lines().map(str::to_string).collect(),
    };
    let mut plan = ParsedPlan::default();
    for raw in lines {
        let line = raw.trim().trim_matches(|c: char| c == '"' || c == ',' || c == '[' || c == ']');
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_plan_line(line) {
            Ok(op) => plan.operations.push(op),
            Err(msg) => plan.diagnostics.push(msg),
        }
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DebateAction {
    GenerateGroups,
    ValidateCurrentGroup(Vec<u64>),
    ValidateOtherGroup(Vec<u64>),
    Finish,
    Unrecognized(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DebateReply {
    pub thought: String,
    pub action: DebateAction,
}

fn numbers(text: &str) -> Vec<u64> {
    let re = Regex::new(r"\d+").expect("static regex");
    re.find_iter(text).filter_map(|m| m.as_str().parse().ok()).collect()
}

/// Parses a `Thought: ... Action: ...` reply.
pub fn parse_debate_reply(reply: &str) -> DebateReply {
    let (thought, action_text) = match reply.find("Action:") {
        Some(pos) => (&reply[..pos], &reply[pos + "Action:".len()..]),
        None => (reply, ""),
    };
    let thought = thought.trim().trim_start_matches("Thought:").trim().to_string();
    let action_text = action_text.trim();
    let action = if action_text.contains("generate_groups") {
        DebateAction::GenerateGroups
    } else if let Some(pos) = action_text.find("validate_current_group") {
        DebateAction::ValidateCurrentGroup(numbers(&action_text[pos + "validate_current_group".len()..]))
    } else if let Some(pos) = action_text.find("validate_other_group") {
        DebateAction::ValidateOtherGroup(numbers(&action_text[pos + "validate_other_group".len()..]))
    } else if action_text.contains("finish") {
        DebateAction::Finish
    } else {
        DebateAction::Unrecognized(action_text.to_string())
    };
    DebateReply { thought, action }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedGroup {
    pub text: String,
    pub trajectories: Vec<u64>,
}

/// Extracts `Degradation Pattern N: ... included trajectories are TrajA, TrajB`
/// groups from the `<convinced_info>` block.
pub fn parse_groups(reply: &str) -> Vec<ParsedGroup> {
    let block = match (reply.find("<convinced_info>"), reply.find("</convinced_info>")) {
        (Some(a), Some(b)) if a < b => &reply[a + "<convinced_info>".len()..b],
        _ => return Vec::new(),
    };
    let header = Regex::new(r"Degradation Pattern \d+:").expect("static regex");
    let traj = Regex::new(r"Traj\s*(\d+)").expect("static regex");
    let starts: Vec<usize> = header.find_iter(block).map(|m| m.end()).collect();
    let ends: Vec<usize> = header
        .find_iter(block)
        .map(|m| m.start())
        .skip(1)
        .chain(std::iter::once(block.len()))
        .collect();
    let mut groups = Vec::new();
    for (start, end) in starts.into_iter().zip(ends) {
        let segment = &block[start..end];
        let Some(split) = segment.find("included trajectories are") else {
            continue;
        };
        let text = segment[..split]
            .trim()
            .trim_start_matches("The pure semantic representation of the degradation pattern text information is")
            .trim()
            .trim_end_matches(',')
            .trim()
            .to_string();
        let rest = &segment[split..];
        let rest = rest.find("reasons are").map_or(rest, |p| &rest[..p]);
        let trajectories: Vec<u64> = traj
            .captures_iter(rest)
            .filter_map(|c| c[1].parse().ok())
            .collect();
        if !trajectories.is_empty() {
            groups.push(ParsedGroup { text, trajectories });
        }
    }
    groups
}

/// Renders groups in the `<convinced_info>` format understood by [`parse_groups`].
pub fn format_groups(groups: &[ParsedGroup]) -> String {
    let body: Vec<String> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let ids: Vec<String> = g.trajectories.iter().map(|t| format!("Traj{t}")).collect();
            format!(
                "Degradation Pattern {}: The pure semantic representation of the degradation pattern text information is {}, included trajectories are {}, reasons are shared description and ranking.",
                i + 1,
                g.text,
                ids.join(", ")
            )
        })
        .collect();
    format!("<convinced_info>{}</convinced_info>", body.join(" "))
}

/// First integer in a refine reply, as a zero-based index into `n` candidates.
pub fn parse_choice(reply: &str, n: usize) -> Option<usize> {
    numbers(reply)
        .first()
        .and_then(|&v| usize::try_from(v).ok())
        .filter(|&v| v >= 1 && v <= n)
        .map(|v| v - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    #[test]
    fn plan_examples() {
        let p = parse_plan_lines(r#"["1 | merge | 2", "2 | add"]"#);
        assert_eq!(
            p.operations,
            vec![
                MetaOperation::Merge { source: 1, target: 2 },
                MetaOperation::Add { source: 2 }
            ]
        );
        assert!(parse_plan_lines("").operations.is_empty());
        assert_eq!(
            parse_plan_lines("9 | replace | 4").operations,
            vec![MetaOperation::Replace { source: 9, target: 4 }]
        );
    }

    #[test]
    fn malformed_plan_lines_are_skipped() {
        let p = parse_plan_lines("1 | merge\nx | add\n2 | teleport | 1\n3 | add\nnonsense");
        assert_eq!(p.operations, vec![MetaOperation::Add { source: 3 }]);
        assert_eq!(p.diagnostics.len(), 4);
    }

    #[test]
    fn plan_line_round_trip() {
        for op in [
            MetaOperation::Add { source: 1 },
            MetaOperation::Update { source: 2, target: 7 },
            MetaOperation::Delete { source: 3, target: 0 },
        ] {
            assert_eq!(parse_plan_lines(&op.to_line()).operations, vec![op]);
        }
    }

    #[test]
    fn debate_replies() {
        let r = parse_debate_reply("Thought: start by grouping.\nAction: generate_groups()");
        assert_eq!(r.action, DebateAction::GenerateGroups);
        assert_eq!(r.thought, "start by grouping.");
        let r = parse_debate_reply("Thought: check.\nAction: validate_current_group([4, 1, 2])");
        assert_eq!(r.action, DebateAction::ValidateCurrentGroup(vec![4, 1, 2]));
        assert_eq!(parse_debate_reply("Action: finish()").action, DebateAction::Finish);
        assert!(matches!(parse_debate_reply("hello").action, DebateAction::Unrecognized(_)));
    }

    #[test]
    fn groups_round_trip() {
        let groups = vec![
            ParsedGroup {
                text: "dense fine grain".into(),
                trajectories: vec![0, 3],
            },
            ParsedGroup {
                text: "coarse blotches".into(),
                trajectories: vec![1],
            },
        ];
        assert_eq!(parse_groups(&format_groups(&groups)), groups);
        assert!(parse_groups("no block").is_empty());
    }

    #[test]
    fn choice_parsing() {
        assert_eq!(parse_choice("2", 3), Some(1));
        assert_eq!(parse_choice("Candidate 3 fits best", 3), Some(2));
        assert_eq!(parse_choice("7", 3), None);
        assert_eq!(parse_choice("none", 3), None);
    }

    #[test]
    fn templates_have_placeholders_filled() {
        let req = OracleRequest::ProposePlan(PlanRequest {
            degradation_type: "noise".into(),
            new_patterns: vec!["1: a".into()],
            existing_patterns: vec![],
            history_plan: "None".into(),
            history_feedback: "None".into(),
        });
        let prompt = req.prompt();
        assert!(prompt.contains("Degradation type: noise"));
        assert!(!prompt.contains("{new_pattern}"));
        let insight = render(INSIGHT_PROMPT, &[("preference", "fidelity"), ("combined_text", "X")]);
        assert!(insight.contains("(Preference: fidelity)"));
    }

    struct Scripted {
        replies: Mutex<VecDeque<std::result::Result<(u16, String), TransportError>>>,
    }

    impl Transport for Scripted {
        fn post(&self, _url: &str, _bearer: &str, _body: &Value) -> std::result::Result<(u16, String), TransportError> {
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or(Err(TransportError::Connection("script exhausted".into())))
        }
    }

    fn remote(script: Vec<std::result::Result<(u16, String), TransportError>>) -> RemoteOracle {
        let config = RemoteConfig {
            backoff_ms: 0,
            ..RemoteConfig::default()
        };
        RemoteOracle::with_transport(
            config,
            "key".into(),
            Box::new(Scripted {
                replies: Mutex::new(script.into()),
            }),
        )
    }

    fn chat_body(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    #[test]
    fn remote_reply_is_verbatim() {
        let oracle = remote(vec![Ok((200, chat_body("canned reply")))]);
        assert_eq!(oracle.distill_insight("p").unwrap(), "canned reply");
        assert_eq!(oracle.attempts(), 1);
    }

    #[test]
    fn remote_retries_transient_failures() {
        let oracle = remote(vec![
            Err(TransportError::Connection("reset".into())),
            Ok((503, "busy".into())),
            Ok((200, chat_body("ok"))),
        ]);
        assert_eq!(oracle.distill_insight("p").unwrap(), "ok");
        assert_eq!(oracle.attempts(), 3);
        let oracle = remote(vec![Ok((500, "x".into())), Ok((429, "x".into())), Ok((502, "x".into()))]);
        assert!(matches!(oracle.distill_insight("p"), Err(Error::OracleUnavailable(_))));
        let oracle = remote(vec![Ok((401, "no".into()))]);
        assert!(matches!(oracle.distill_insight("p"), Err(Error::ConfigError(_))));
        assert_eq!(oracle.attempts(), 1);
    }

    #[test]
    fn remote_embedding() {
        let body = json!({"data": [{"embedding": [0.5, -0.25]}]}).to_string();
        let oracle = remote(vec![Ok((200, body))]);
        assert_eq!(oracle.embed(&ImageRef::new("img")).unwrap(), vec![0.5, -0.25]);
    }

    struct Echo;
    impl LanguageOracle for Echo {
        fn complete(&self, request: &OracleRequest) -> Result<String> {
            Ok(format!("echo {}", request.capability()))
        }
    }
    impl EncoderOracle for Echo {
        fn embed(&self, image: &ImageRef) -> Result<Vec<f64>> {
            Ok(vec![image.as_str().len() as f64, 0.1])
        }
    }

    #[test]
    fn record_then_replay() {
        let transcript = Transcript::new();
        let rec = Recording::new(Echo, transcript.clone());
        let a = rec.describe(&ImageRef::new("i1"), "noise").unwrap();
        let e = rec.embed(&ImageRef::new("i22")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        transcript.save(&path).unwrap();
        let replay = Replay::new(Transcript::load(&path).unwrap());
        assert_eq!(replay.embed(&ImageRef::new("i22")).unwrap(), e);
        assert_eq!(replay.describe(&ImageRef::new("i1"), "noise").unwrap(), a);
        assert_eq!(replay.remaining(), 0);
        assert!(matches!(
            replay.describe(&ImageRef::new("i1"), "noise"),
            Err(Error::OracleProtocol(_))
        ));
    }
}
