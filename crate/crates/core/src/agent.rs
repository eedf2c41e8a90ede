//! The three-step agent protocol: prompt construction, strict tag + JSON
//! parsing, chat/embedding backends (offline stub or HTTP), the sequential
//! pipeline that resolves free-text answers onto the taxonomy, and offline
//! scoring of transcripts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{HierarchicalDecision, SemanticDomain, SpatioTemporalContext, Taxonomy, UserRecord};
use crate::policy::SamplingConfig;
use crate::reward::{
    combine, format_reward, l2_normalize, match_scores, nearest_candidate, normalize_text, token_count, EmbedError,
    Embedder, MatchScores, ParsedOutputs, RewardBreakdown, RewardError, RewardParams, Stage, Truths,
};

/// Most recent interactions included in a prompt.
pub const HISTORY_WINDOW: usize = 20;
pub const API_KEY_ENV: &str = "NEEDFORGE_API_KEY";

pub const SYSTEM_ROLE: &str = "You are an autonomous Recommendation Agent. Your objective is to formulate precise recommendations by orchestrating specific function tools to analyze user data, map semantic categories, and rank potential behaviors based on the current spatiotemporal context.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage { role, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolStep {
    Intent,
    Category,
    Behavior,
}

impl ProtocolStep {
    pub const ALL: [ProtocolStep; 3] = [ProtocolStep::Intent, ProtocolStep::Category, ProtocolStep::Behavior];

    pub fn tag(self) -> &'static str {
        match self {
            ProtocolStep::Intent => "intent",
            ProtocolStep::Category => "category",
            ProtocolStep::Behavior => "behavior",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ProtocolStep::Intent => "predicted_intent",
            ProtocolStep::Category => "predicted_category",
            ProtocolStep::Behavior => "predicted_behavior",
        }
    }

    pub fn number(self) -> usize {
        self as usize + 1
    }

    fn title(self) -> &'static str {
        match self {
            ProtocolStep::Intent => "Living need Inference",
            ProtocolStep::Category => "Category Mapping",
            ProtocolStep::Behavior => "Behavior Ranking",
        }
    }

    /// First line of the step's user message; the stub backend keys on it.
    pub fn header(self) -> String {
        format!("## Step {}: {}", self.number(), self.title())
    }

    fn output_format(self) -> String {
        let name = match self {
            ProtocolStep::Intent => "Intent Name",
            ProtocolStep::Category => "Category Name",
            ProtocolStep::Behavior => "Behavior Name",
        };
        format!(
            "<{tag}>\n{{\"{key}\": \"{name}\",\n \"reasoning_summary\": \"Brief Reasoning\"}}\n</{tag}>",
            tag = self.tag(),
            key = self.key()
        )
    }
}

impl fmt::Display for ProtocolStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutput {
    pub step: ProtocolStep,
    pub predicted: String,
    pub reasoning_summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ProtocolError {
    #[error("protocol: tag absent (<{step}>)")]
    TagAbsent { step: ProtocolStep },
    #[error("protocol: bad json in <{step}>: {message}")]
    BadJson { step: ProtocolStep, message: String },
    #[error("protocol: missing key {key} in <{step}>")]
    MissingKey { step: ProtocolStep, key: String },
    #[error("protocol: empty prediction in <{step}>")]
    EmptyPrediction { step: ProtocolStep },
}

/// Payload of the first `<tag>` block; without a closing tag the payload
/// runs to the end of the text.
fn extract_block<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.find(&open)? + open.len();
    let rest = &raw[start..];
    Some(rest.find(&close).map_or(rest, |end| &rest[..end]))
}

/// Parses one step's answer: first matching tag block, JSON object inside,
/// the step's `predicted_*` key as a non-empty string. A missing or
/// non-string `reasoning_summary` is tolerated as empty.
pub fn parse_step_output(step: ProtocolStep, raw: &str) -> Result<StepOutput, ProtocolError> {
    let payload = extract_block(raw, step.tag()).ok_or(ProtocolError::TagAbsent { step })?;
    let value: Value =
        serde_json::from_str(payload.trim()).map_err(|e| ProtocolError::BadJson { step, message: e.to_string() })?;
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError::BadJson { step, message: "expected a JSON object".into() })?;
    let predicted = obj
        .get(step.key())
        .and_then(Value::as_str)
        .ok_or_else(|| ProtocolError::MissingKey { step, key: step.key().into() })?
        .trim()
        .to_string();
    if predicted.is_empty() {
        return Err(ProtocolError::EmptyPrediction { step });
    }
    let reasoning_summary = obj.get("reasoning_summary").and_then(Value::as_str).unwrap_or("").to_string();
    Ok(StepOutput { step, predicted, reasoning_summary })
}

fn format_context(ctx: &SpatioTemporalContext) -> String {
    let date = chrono::DateTime::from_timestamp(ctx.timestamp, 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| ctx.timestamp.to_string());
    format!(
        "time {:02}:00 on {date}; location: {} ({:.4}, {:.4})",
        ctx.time_bucket,
        ctx.location_type.as_str(),
        ctx.latitude,
        ctx.longitude
    )
}

fn label<'a>(labels: impl Fn(usize) -> Option<&'a str>, id: usize) -> String {
    labels(id).map_or_else(|| format!("#{id}"), str::to_string)
}

/// Messages for one step. Pure: identical inputs give identical bytes.
/// `prior` holds the outputs of the earlier steps, in order.
pub fn build_prompt(
    taxonomy: &Taxonomy,
    user: &UserRecord,
    context: &SpatioTemporalContext,
    step: ProtocolStep,
    prior: &[StepOutput],
) -> Vec<ChatMessage> {
    let mut u = String::new();
    u.push_str(&step.header());
    u.push_str("\n\n");
    let action = match step {
        ProtocolStep::Intent => "Query the UserProfile MCP to retrieve long-term preferences. Combine with current Context (Time/Location) to filter candidate living needs.",
        ProtocolStep::Category => "Call the Intent Parser to retrieve the predicted living need from Step 1.",
        ProtocolStep::Behavior => "Call the Category Parser to retrieve the predicted category from Step 2 based on the semantic matching score.",
    };
    let reasoning = match step {
        ProtocolStep::Intent => "Explain which profile feature triggered the selection of the living need from the candidate list.",
        ProtocolStep::Category => "Justify the category choice by linking the living need to specific domain availability.",
        ProtocolStep::Behavior => "Explain why this behavior ranks highest.",
    };
    u.push_str(&format!("Agent Action: {action}\n\nReasoning Requirement: {reasoning}\n"));
    if step == ProtocolStep::Category {
        u.push_str("Semantic domains for categories:\n");
        for d in SemanticDomain::ALL {
            let hint = match d {
                SemanticDomain::FoodBeverage => " (e.g., Chinese/Western cuisine...)",
                SemanticDomain::Accommodation => " (e.g., luxury, budget hotels)",
                SemanticDomain::LifestyleServices => " (e.g., beauty, laundry)",
                _ => "",
            };
            u.push_str(&format!("- {}{hint}\n", d.label()));
        }
    }

    u.push_str("\nUser profile:\n");
    u.push_str(&serde_json::to_string(&user.profile).expect("string map serializes"));
    u.push_str("\n\nRecent history (oldest first):\n");
    let start = user.history.len().saturating_sub(HISTORY_WINDOW);
    if start == user.history.len() {
        u.push_str("(none)\n");
    }
    for it in &user.history[start..] {
        u.push_str(&format!(
            "- {} | need: {} | category: {} | behavior: {}\n",
            format_context(&it.context),
            label(|i| taxonomy.needs().get(i).map(|x| x.label.as_str()), it.need_id),
            label(|i| taxonomy.categories().get(i).map(|x| x.label.as_str()), it.category_id),
            label(|i| taxonomy.behaviors().get(i).map(|x| x.label.as_str()), it.behavior_id),
        ));
    }
    u.push_str(&format!("\nCurrent context: {}\n", format_context(context)));
    if step == ProtocolStep::Intent {
        u.push_str("\nCandidate living needs: ");
        u.push_str(&taxonomy.needs().iter().map(|n| n.label.as_str()).collect::<Vec<_>>().join(", "));
        u.push('\n');
    }
    for earlier in ProtocolStep::ALL.iter().take(step as usize) {
        u.push_str(&format!("\nStep {} result:\n", earlier.number()));
        match prior.iter().find(|p| p.step == *earlier) {
            Some(p) => {
                let json = serde_json::json!({ earlier.key(): p.predicted, "reasoning_summary": p.reasoning_summary });
                u.push_str(&format!("<{t}>{json}</{t}>\n", t = earlier.tag()));
            }
            None => u.push_str("(none)\n"),
        }
    }
    u.push_str("\nOutput format:\n");
    u.push_str(&step.output_format());
    vec![ChatMessage::new(Role::System, SYSTEM_ROLE), ChatMessage::new(Role::User, u)]
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("stub: {0}")]
    Stub(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub kind: String,
    pub model: String,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], sampling: &SamplingConfig) -> Result<String, BackendError>;
    fn identity(&self) -> BackendIdentity;
}

/// Canned raw outputs for the three steps of one pipeline run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubFixture {
    pub intent: String,
    pub category: String,
    pub behavior: String,
}

impl StubFixture {
    fn get(&self, step: ProtocolStep) -> &str {
        match step {
            ProtocolStep::Intent => &self.intent,
            ProtocolStep::Category => &self.category,
            ProtocolStep::Behavior => &self.behavior,
        }
    }
}

/// Offline backend: answers each step with its fixture, recognizing the
/// step from the header of the last user message.
#[derive(Debug, Clone)]
pub struct StubBackend {
    fixture: StubFixture,
    name: String,
}

impl StubBackend {
    pub fn new(fixture: StubFixture) -> Self {
        StubBackend { fixture, name: "fixture".into() }
    }

    /// Reads `<name>.json` from a fixture directory.
    pub fn from_dir(dir: &Path, name: &str) -> Result<Self, BackendError> {
        let path = dir.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&path)
            .map_err(|e| BackendError::Stub(format!("{}: {}", path.display(), io_message(&e))))?;
        let fixture = serde_json::from_str(&text).map_err(|e| BackendError::Stub(format!("{}: {e}", path.display())))?;
        Ok(StubBackend { fixture, name: name.to_string() })
    }
}

pub(crate) fn io_message(e: &std::io::Error) -> String {
    if e.kind() == std::io::ErrorKind::NotFound {
        "file not found".into()
    } else {
        e.to_string()
    }
}

impl ChatBackend for StubBackend {
    fn complete(&self, messages: &[ChatMessage], _: &SamplingConfig) -> Result<String, BackendError> {
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::Stub("no user message".into()))?;
        ProtocolStep::ALL
            .into_iter()
            .find(|s| last.content.starts_with(&s.header()))
            .map(|s| self.fixture.get(s).to_string())
            .ok_or_else(|| BackendError::Stub("unrecognized step header".into()))
    }

    fn identity(&self) -> BackendIdentity {
        BackendIdentity { kind: "stub".into(), model: self.name.clone() }
    }
}

/// Delays before each retry; the number of retries is the list's length.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { backoff: [500, 2000, 8000].map(Duration::from_millis).to_vec() }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { backoff: Vec::new() }
    }

    fn run<T>(&self, mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut delays = self.backoff.iter();
        loop {
            match f() {
                Err(e) if e.retryable() => match delays.next() {
                    Some(d) => {
                        log::warn!("request failed ({e}); retrying in {d:?}");
                        std::thread::sleep(*d);
                    }
                    None => return Err(e),
                },
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone)]
struct HttpClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpClient {
    fn new(base_url: &str, model: &str, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry: RetryPolicy::default(),
            client,
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{path}", self.base_url);
        self.retry.run(|| {
            let mut req = self.client.post(&url).json(body);
            if let Some(k) = &self.api_key {
                req = req.bearer_auth(k);
            }
            let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
            let status = resp.status();
            let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
            if !status.is_success() {
                return Err(BackendError::Status { status: status.as_u16(), body: text });
            }
            serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))
        })
    }
}

/// Chat-completions client: `POST {base}/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    http: HttpClient,
}

impl HttpChatBackend {
    pub fn new(base_url: &str, model: &str) -> Result<Self, BackendError> {
        Ok(HttpChatBackend { http: HttpClient::new(base_url, model, Duration::from_secs(120))? })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.http.retry = retry;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.http.api_key = key;
        self
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, messages: &[ChatMessage], sampling: &SamplingConfig) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.http.model,
            "messages": messages,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "n": 1,
        });
        let v = self.http.post("chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))
    }

    fn identity(&self) -> BackendIdentity {
        BackendIdentity { kind: "http".into(), model: self.http.model.clone() }
    }
}

/// Embedding client: `POST {base}/embeddings`; vectors are L2-normalized on
/// receipt.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    http: HttpClient,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: &str, dim: usize) -> Result<Self, BackendError> {
        Ok(HttpEmbedder { http: HttpClient::new(base_url, model, Duration::from_secs(60))?, dim })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.http.retry = retry;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.http.api_key = key;
        self
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut v = self.embed_batch(&[text])?;
        Ok(v.pop().expect("one input, one vector"))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let body = serde_json::json!({ "model": self.http.model, "input": texts });
        let v = self.http.post("embeddings", &body).map_err(|e| EmbedError::Backend(e.to_string()))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Backend("missing data array".into()))?;
        if data.len() != texts.len() {
            return Err(EmbedError::Backend(format!("{} vectors for {} inputs", data.len(), texts.len())));
        }
        data.iter()
            .map(|d| {
                let vec: Vec<f64> = d
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| EmbedError::Backend("missing embedding".into()))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| EmbedError::Backend("non-numeric embedding".into())))
                    .collect::<Result<_, _>>()?;
                if vec.len() != self.dim {
                    return Err(EmbedError::Dimension { expected: self.dim, found: vec.len() });
                }
                l2_normalize(vec)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionMethod {
    Exact,
    Semantic,
}

/// How a free-text answer was mapped onto a taxonomy id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub id: usize,
    pub label: String,
    pub method: ResolutionMethod,
    /// Cosine to the chosen label; `None` for exact matches.
    pub cosine: Option<f64>,
}

/// Maps `text` to one of `candidates` (id, label): normalized exact match
/// first, otherwise the nearest label by embedding cosine (the same rule
/// the category reward uses, ties to the lowest candidate position).
pub fn resolve<E: Embedder + ?Sized>(
    text: &str,
    candidates: &[(usize, &str)],
    embedder: &E,
) -> Result<Resolution, AgentError> {
    if candidates.is_empty() {
        return Err(AgentError::NoCandidates);
    }
    let norm = normalize_text(text);
    if let Some((id, l)) = candidates.iter().find(|(_, l)| normalize_text(l) == norm) {
        return Ok(Resolution { id: *id, label: l.to_string(), method: ResolutionMethod::Exact, cosine: None });
    }
    let labels: Vec<&str> = candidates.iter().map(|(_, l)| *l).collect();
    let nearest = nearest_candidate(embedder, text, &labels)?.ok_or(AgentError::NoCandidates)?;
    let (id, l) = candidates[nearest.index];
    Ok(Resolution { id, label: l.to_string(), method: ResolutionMethod::Semantic, cosine: Some(nearest.cosine) })
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error("reward: {0}")]
    Reward(#[from] RewardError),
    #[error("no candidates to resolve against")]
    NoCandidates,
    #[error("{transcripts} transcripts but {truths} truths")]
    LengthMismatch { transcripts: usize, truths: usize },
    #[error("step {step} failed: {source}")]
    Step {
        step: ProtocolStep,
        #[source]
        source: Box<AgentError>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: ProtocolStep,
    pub messages: Vec<ChatMessage>,
    pub raw_output: String,
    pub output: StepOutput,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub user_id: String,
    pub backend: BackendIdentity,
    pub context: SpatioTemporalContext,
    pub steps: Vec<StepRecord>,
    pub decision: HierarchicalDecision,
}

impl Transcript {
    pub fn step(&self, step: ProtocolStep) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.step == step)
    }
}

/// Runs the three steps in order. Needs and categories resolve against the
/// whole taxonomy, behaviors against the resolved category's behaviors, so
/// the decision is always a consistent path.
pub fn run_pipeline<B: ChatBackend + ?Sized, E: Embedder + ?Sized>(
    backend: &B,
    embedder: &E,
    taxonomy: &Taxonomy,
    user: &UserRecord,
    context: &SpatioTemporalContext,
    sampling: &SamplingConfig,
) -> Result<Transcript, AgentError> {
    let mut steps: Vec<StepRecord> = Vec::with_capacity(3);
    let mut outputs: Vec<StepOutput> = Vec::with_capacity(3);
    for step in ProtocolStep::ALL {
        let wrap = |e: AgentError| AgentError::Step { step, source: Box::new(e) };
        let messages = build_prompt(taxonomy, user, context, step, &outputs);
        let raw = backend.complete(&messages, sampling).map_err(|e| wrap(e.into()))?;
        let output = parse_step_output(step, &raw).map_err(|e| wrap(e.into()))?;
        let candidates: Vec<(usize, &str)> = match step {
            ProtocolStep::Intent => taxonomy.needs().iter().map(|n| (n.id, n.label.as_str())).collect(),
            ProtocolStep::Category => taxonomy.categories().iter().map(|c| (c.id, c.label.as_str())).collect(),
            ProtocolStep::Behavior => {
                let cat = steps[1].resolution.id;
                taxonomy
                    .behaviors_of(cat)
                    .iter()
                    .map(|b| (*b, taxonomy.behaviors()[*b].label.as_str()))
                    .collect()
            }
        };
        let resolution = resolve(&output.predicted, &candidates, embedder).map_err(wrap)?;
        log::debug!("step {step}: '{}' -> {} ({:?})", output.predicted, resolution.label, resolution.method);
        outputs.push(output.clone());
        steps.push(StepRecord { step, messages, raw_output: raw, output, resolution });
    }
    let mut decision = HierarchicalDecision::new(steps[0].resolution.id, steps[1].resolution.id, steps[2].resolution.id);
    decision.reasoning = outputs.iter().map(|o| o.reasoning_summary.clone()).collect();
    Ok(Transcript { user_id: user.user_id.clone(), backend: backend.identity(), context: *context, steps, decision })
}

/// Runs pipelines for several users with at most `max_in_flight` running at
/// once; results keep input order.
pub fn run_pipelines<B: ChatBackend + ?Sized, E: Embedder + ?Sized>(
    backend: &B,
    embedder: &E,
    taxonomy: &Taxonomy,
    jobs: &[(UserRecord, SpatioTemporalContext)],
    sampling: &SamplingConfig,
    max_in_flight: usize,
) -> Vec<Result<Transcript, AgentError>> {
    use rayon::prelude::*;
    let run = || {
        jobs.par_iter()
            .map(|(u, c)| run_pipeline(backend, embedder, taxonomy, u, c, sampling))
            .collect::<Vec<_>>()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(max_in_flight.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => jobs.iter().map(|(u, c)| run_pipeline(backend, embedder, taxonomy, u, c, sampling)).collect(),
    }
}

/// One stand-alone output to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLine {
    pub stage: Stage,
    pub raw_output: String,
    pub truth_need: String,
    pub truth_category: String,
    pub truth_behavior: String,
    #[serde(default)]
    pub step: u64,
}

fn parsed_from_raw(raw: &str, steps: &[ProtocolStep]) -> ParsedOutputs {
    let mut out = ParsedOutputs { format_ok: true, ..Default::default() };
    for s in steps {
        let keys = [s.key(), "reasoning_summary"];
        let payload = extract_block(raw, s.tag()).unwrap_or("");
        if format_reward(payload.trim(), &keys) == 0.0 {
            out.format_ok = false;
        }
        let pred = parse_step_output(*s, raw).ok().map(|o| o.predicted);
        match s {
            ProtocolStep::Intent => out.need = pred,
            ProtocolStep::Category => out.category = pred,
            ProtocolStep::Behavior => out.behavior = pred,
        }
    }
    out
}

fn stage_steps(stage: Stage) -> &'static [ProtocolStep] {
    &ProtocolStep::ALL[..stage.depth()]
}

/// Scores a raw output for `stage`; the output must contain the tag blocks
/// of every step the stage covers.
pub fn score_output<E: Embedder + ?Sized>(
    line: &OutputLine,
    params: &RewardParams,
    taxonomy: &Taxonomy,
    embedder: &E,
) -> Result<(RewardBreakdown, MatchScores), AgentError> {
    let parsed = parsed_from_raw(&line.raw_output, stage_steps(line.stage));
    let truths = Truths {
        need: line.truth_need.clone(),
        category: line.truth_category.clone(),
        behavior: line.truth_behavior.clone(),
    };
    let scores = match_scores(line.stage, &parsed, &truths, taxonomy, embedder)?;
    let tokens = token_count(&line.raw_output) as f64;
    let b = combine(line.stage, scores.for_stage(line.stage), parsed.format_ok, tokens, line.step as f64, params);
    Ok((b, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptScore {
    pub user_id: String,
    pub need: RewardBreakdown,
    pub category: RewardBreakdown,
    pub full_path: RewardBreakdown,
    pub need_match: f64,
    pub category_match: f64,
    pub behavior_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreAggregate {
    pub n: usize,
    pub need_accuracy: f64,
    pub mean_category_match: f64,
    pub behavior_accuracy: f64,
    pub mean_total: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<TranscriptScore>,
    /// `None` for an empty input.
    pub aggregate: Option<ScoreAggregate>,
}

/// Scores each transcript against its truth at every stage. Stage `k`
/// sees the raw outputs of steps 1..=k; `step` feeds the length term.
pub fn score_transcripts<E: Embedder + ?Sized>(
    transcripts: &[Transcript],
    truths: &[Truths],
    params: &RewardParams,
    taxonomy: &Taxonomy,
    embedder: &E,
    step: u64,
) -> Result<ScoreReport, AgentError> {
    if transcripts.len() != truths.len() {
        return Err(AgentError::LengthMismatch { transcripts: transcripts.len(), truths: truths.len() });
    }
    let mut rows = Vec::with_capacity(transcripts.len());
    for (t, truth) in transcripts.iter().zip(truths) {
        let score = |stage: Stage| {
            let raw: Vec<&str> = stage_steps(stage)
                .iter()
                .map(|s| t.step(*s).map_or("", |r| r.raw_output.as_str()))
                .collect();
            let line = OutputLine {
                stage,
                raw_output: raw.join("\n"),
                truth_need: truth.need.clone(),
                truth_category: truth.category.clone(),
                truth_behavior: truth.behavior.clone(),
                step,
            };
            score_output(&line, params, taxonomy, embedder)
        };
        let (need, _) = score(Stage::Need)?;
        let (category, _) = score(Stage::Category)?;
        let (full_path, m) = score(Stage::FullPath)?;
        rows.push(TranscriptScore {
            user_id: t.user_id.clone(),
            need,
            category,
            full_path,
            need_match: m.need,
            category_match: m.category,
            behavior_match: m.behavior,
        });
    }
    Ok(ScoreReport { aggregate: aggregate(&rows), rows })
}

fn aggregate(rows: &[TranscriptScore]) -> Option<ScoreAggregate> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&TranscriptScore) -> f64| crate::numeric::compensated_sum(rows.iter().map(f)) / n;
    let mut mean_total = BTreeMap::new();
    mean_total.insert("need".to_string(), avg(&|r| r.need.total));
    mean_total.insert("category".to_string(), avg(&|r| r.category.total));
    mean_total.insert("full_path".to_string(), avg(&|r| r.full_path.total));
    Some(ScoreAggregate {
        n: rows.len(),
        need_accuracy: avg(&|r| r.need_match),
        mean_category_match: avg(&|r| r.category_match),
        behavior_accuracy: avg(&|r| r.behavior_match),
        mean_total,
    })
}

/// Small taxonomy covering the three worked examples below.
pub fn case_study_taxonomy() -> Taxonomy {
    use SemanticDomain::*;
    let needs = ["Family Care", "Late-Night Hunger", "Business Travel", "Leisure Travel", "Social Dining"];
    let categories = [
        ("Fruit", GroceryFreshProduce),
        ("Fresh Vegetables", GroceryFreshProduce),
        ("Bread & Cakes", FoodBeverage),
        ("Hot Pot", FoodBeverage),
        ("Economy Hotel", Accommodation),
        ("Luxury Hotel", Accommodation),
        ("Cinema", EntertainmentLeisure),
        ("Laundry", LifestyleServices),
    ];
    let behaviors = [
        ("Seasonal fruit platter", 0),
        ("Fresh strawberries", 0),
        ("Leafy greens bundle", 1),
        ("Cream bread", 2),
        ("Cheesecake slice", 2),
        ("Spicy hot pot for two", 3),
        ("Budget business hotel room", 4),
        ("Express inn single room", 4),
        ("Five-star suite", 5),
        ("Evening movie ticket", 6),
        ("Laundry pickup", 7),
    ];
    Taxonomy::new(
        needs.iter().map(|s| s.to_string()).collect(),
        categories.iter().map(|(l, d)| (l.to_string(), *d)).collect(),
        behaviors.iter().map(|(l, c)| (l.to_string(), *c)).collect(),
    )
    .expect("case study taxonomy is valid")
}

/// A worked example: user, context, the model's three raw answers and the
/// labels they should resolve to.
#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub name: &'static str,
    pub user: UserRecord,
    pub context: SpatioTemporalContext,
    pub fixture: StubFixture,
    pub expected_need: &'static str,
    pub expected_category: &'static str,
    pub expected_behavior: &'static str,
}

fn raw(step: ProtocolStep, predicted: &str, why: &str, chatter: &str) -> String {
    let json = serde_json::json!({ step.key(): predicted, "reasoning_summary": why });
    format!("{chatter}<{t}>\n{json}\n</{t}>", t = step.tag())
}

/// The three worked examples: a cold-start family dinner, late-night hunger
/// away from the usual places, and a business trip read from history.
pub fn case_studies() -> Vec<CaseStudy> {
    use crate::domain::{Interaction, LocationType, UserProfile};
    let tax = case_study_taxonomy();
    let id = |f: &dyn Fn(&Taxonomy) -> Option<usize>| f(&tax).expect("label exists");
    let at = |ts: i64, loc: LocationType, lat: f64, lon: f64| {
        SpatioTemporalContext::new(ts, lat, lon, loc).expect("valid coordinates")
    };
    // 2024-03-04 is a Monday; timestamps are UTC.
    let day = 1_709_510_400;
    let profile = |pairs: &[(&str, &str)]| pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<UserProfile>();
    let interaction = |need: &str, cat: &str, beh: &str, ctx: SpatioTemporalContext| Interaction {
        need_id: id(&|t| t.need_id(need)),
        category_id: id(&|t| t.category_id(cat)),
        behavior_id: id(&|t| t.behavior_id(beh)),
        context: ctx,
    };

    let case1 = CaseStudy {
        name: "cold_start_family",
        user: UserRecord {
            user_id: "case1".into(),
            profile: profile(&[("marital_status", "married"), ("children", "yes")]),
            history: Vec::new(),
        },
        context: at(day + 19 * 3600, LocationType::Home, 31.2, 121.44),
        fixture: StubFixture {
            intent: raw(
                ProtocolStep::Intent,
                "Family Care",
                "Married with kids; 19:00 at home is family dinner time",
                "Let me think about this user. ",
            ),
            category: raw(
                ProtocolStep::Category,
                "Fruit",
                "Fruit is a healthy after-dinner supplement for children",
                "",
            ),
            behavior: raw(ProtocolStep::Behavior, "Seasonal fruit platter", "Easy to share with the family", ""),
        },
        expected_need: "Family Care",
        expected_category: "Fruit",
        expected_behavior: "Seasonal fruit platter",
    };

    let mut history2 = Vec::new();
    for d in 0..4 {
        let ctx = at(day - (10 - d) * 86_400 + 9 * 3600, LocationType::Workplace, 31.23, 121.5);
        history2.push(interaction("Late-Night Hunger", "Bread & Cakes", "Cream bread", ctx));
    }
    let case2 = CaseStudy {
        name: "late_night_hunger",
        user: UserRecord { user_id: "case2".into(), profile: profile(&[("age_group", "25-34")]), history: history2 },
        context: at(day + 2 * 3600, LocationType::Scenic, 31.24, 121.49),
        fixture: StubFixture {
            intent: raw(
                ProtocolStep::Intent,
                "Late-Night Hunger",
                "02:00 in a scenic area with few options open",
                "",
            ),
            // An off-taxonomy paraphrase; resolves semantically.
            category: raw(
                ProtocolStep::Category,
                "Breads and Cakes",
                "Strong history of bakery snacks; quick relief rather than a meal",
                "",
            ),
            behavior: raw(ProtocolStep::Behavior, "Cream bread", "Most frequent past choice", ""),
        },
        expected_need: "Late-Night Hunger",
        expected_category: "Bread & Cakes",
        expected_behavior: "Cream bread",
    };

    let mut history3 = Vec::new();
    for d in 0..3 {
        let ctx = at(day - (20 - 5 * d) * 86_400 + 8 * 3600, LocationType::Workplace, 31.23, 121.5);
        history3.push(interaction("Business Travel", "Economy Hotel", "Budget business hotel room", ctx));
    }
    let case3 = CaseStudy {
        name: "business_trip",
        user: UserRecord { user_id: "case3".into(), profile: profile(&[("occupation", "sales")]), history: history3 },
        context: at(day + 22 * 3600 + 1800, LocationType::Workplace, 31.23, 121.5),
        fixture: StubFixture {
            intent: raw(
                ProtocolStep::Intent,
                "Business Travel",
                "Repeated morning economy hotel bookings near the workplace",
                "",
            ),
            category: raw(ProtocolStep::Category, "Economy Hotel", "Budget-friendly stay, as in history", ""),
            behavior: raw(
                ProtocolStep::Behavior,
                "Budget business hotel room",
                "Matches past bookings",
                "Ranking candidates... ",
            ),
        },
        expected_need: "Business Travel",
        expected_category: "Economy Hotel",
        expected_behavior: "Budget business hotel room",
    };
    vec![case1, case2, case3]
}
