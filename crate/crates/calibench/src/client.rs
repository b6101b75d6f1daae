//! Chat-completions client: multimodal message assembly, retries with
//! exponential backoff, a content-addressed response cache, and bounded
//! parallel plan execution.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{list_frame_files, sample_frame_indices, Attachment, AttachmentKind, EvalItem};
use crate::error::{Error, Result};
use crate::prompting::{bind_second_round, item_bindings, render, DialoguePlan, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout: Duration,
}

impl ModelEndpoint {
    pub fn new(base_url: &str, model_name: &str) -> Result<Self> {
        if !base_url.starts_with("http://") && !base_url.starts_with("https://") {
            return Err(Error::InvalidEndpoint(format!(
                "base_url must be absolute (http/https), got {base_url:?}"
            )));
        }
        if model_name.is_empty() {
            return Err(Error::InvalidEndpoint("model_name must be non-empty".into()));
        }
        Ok(ModelEndpoint {
            base_url: base_url.trim_end_matches('/').to_string(),
            model_name: model_name.to_string(),
            api_key_env: None,
            temperature: 0.0,
            max_tokens: 4096,
            timeout: Duration::from_secs(120),
        })
    }

    pub fn api_key(&self) -> Option<String> {
        self.api_key_env.as_ref().and_then(|v| std::env::var(v).ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// OpenAI-style content part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn user_text(text: &str) -> Self {
        ChatMessage {
            role: Role::User,
            content: vec![ContentPart::Text { text: text.to_string() }],
        }
    }

    pub fn assistant_text(text: &str) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: vec![ContentPart::Text { text: text.to_string() }],
        }
    }

    /// Concatenated text parts, used when matching against transcripts.
    pub fn text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::ImageUrl { .. } => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportResponse {
    pub content: String,
    pub usage: Option<TokenUsage>,
}

/// Transport-level failure classes; only `Retryable` triggers backoff.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Auth(String),
    Retryable(String),
    Fatal(String),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Auth(m) => write!(f, "auth: {m}"),
            TransportError::Retryable(m) => write!(f, "retryable: {m}"),
            TransportError::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

/// The wire boundary. Tests substitute scripted implementations so the whole
/// harness runs without network access.
pub trait ChatTransport: Send + Sync {
    fn send(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
    ) -> std::result::Result<TransportResponse, TransportError>;
}

/// Real HTTP transport: POST {base_url}/chat/completions.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<TokenUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatTransport for HttpTransport {
    fn send(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
    ) -> std::result::Result<TransportResponse, TransportError> {
        let url = format!("{}/chat/completions", endpoint.base_url);
        let mut builder = self
            .client
            .post(&url)
            .timeout(endpoint.timeout)
            .json(request);
        if let Some(key) = endpoint.api_key() {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() {
                TransportError::Retryable(e.to_string())
            } else {
                TransportError::Fatal(e.to_string())
            }
        })?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(TransportError::Auth(format!("HTTP {status}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(TransportError::Fatal(format!("HTTP {status}")));
        }
        let body: WireResponse = response
            .json()
            .map_err(|e| TransportError::Fatal(format!("bad response body: {e}")))?;
        let content = body
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .unwrap_or_default();
        Ok(TransportResponse {
            content,
            usage: body.usage,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base: Duration,
    pub factor: f64,
    /// Relative jitter, e.g. 0.2 for ±20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Backoff before retry number `attempt` (1-based: delay after the
    /// attempt'th failure).
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base.as_secs_f64() * self.factor.powi(attempt as i32 - 1);
        let jittered = exp * (1.0 + rand::thread_rng().gen_range(-self.jitter..=self.jitter));
        Duration::from_secs_f64(jittered.max(0.0))
    }
}

/// Content-addressed response cache: one file per request digest.
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ResponseCache { dir: dir.to_path_buf() })
    }

    /// sha256 over the serialized (model, messages, temperature, max_tokens);
    /// any byte change in a prompt changes the key.
    pub fn key(request: &ChatRequest) -> String {
        let bytes = serde_json::to_vec(request).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.dir.join(key)).ok()
    }

    /// Atomic write: temp file then rename, so concurrent readers never see a
    /// partial entry.
    pub fn put(&self, key: &str, text: &str) -> Result<()> {
        let tmp = self.dir.join(format!(".{key}.tmp"));
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, self.dir.join(key))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionOutcome {
    pub text: String,
    pub usage: Option<TokenUsage>,
    pub cache_hit: bool,
}

/// One executed round of a dialogue plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    /// 1-based round number.
    pub index: usize,
    pub request_messages: Vec<ChatMessage>,
    pub response_text: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub item_id: String,
    pub strategy: Strategy,
    pub rounds: Vec<Round>,
}

/// A dialogue error tagged with the failing round; completed rounds are kept.
#[derive(Debug)]
pub struct DialogueFailure {
    pub error: Error,
    pub partial: Transcript,
}

pub struct Client {
    pub endpoint: ModelEndpoint,
    transport: Arc<dyn ChatTransport>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    concurrency: usize,
    frames_per_video: u32,
}

impl Client {
    pub fn new(endpoint: ModelEndpoint, transport: Arc<dyn ChatTransport>) -> Self {
        Client {
            endpoint,
            transport,
            cache: None,
            retry: RetryPolicy::default(),
            concurrency: 4,
            frames_per_video: 32,
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, concurrency: usize) -> Self {
        assert!(concurrency >= 1);
        self.concurrency = concurrency;
        self
    }

    pub fn with_frames_per_video(mut self, frames: u32) -> Self {
        assert!(frames >= 1);
        self.frames_per_video = frames;
        self
    }

    /// Sends one request, consulting the cache first and retrying transient
    /// transport failures with exponential backoff.
    pub fn complete(&self, messages: Vec<ChatMessage>) -> Result<CompletionOutcome> {
        assert!(!messages.is_empty());
        let request = ChatRequest {
            model: self.endpoint.model_name.clone(),
            messages,
            temperature: self.endpoint.temperature,
            max_tokens: self.endpoint.max_tokens,
        };
        let key = ResponseCache::key(&request);
        if let Some(cache) = &self.cache {
            if let Some(text) = cache.get(&key) {
                return Ok(CompletionOutcome {
                    text,
                    usage: None,
                    cache_hit: true,
                });
            }
        }
        let mut last_error = String::new();
        for attempt in 1..=self.retry.max_attempts {
            match self.transport.send(&self.endpoint, &request) {
                Ok(response) => {
                    if response.content.is_empty() {
                        return Err(Error::EmptyResponse);
                    }
                    if let Some(cache) = &self.cache {
                        cache.put(&key, &response.content)?;
                    }
                    return Ok(CompletionOutcome {
                        text: response.content,
                        usage: response.usage,
                        cache_hit: false,
                    });
                }
                Err(TransportError::Auth(m)) => return Err(Error::Auth(m)),
                Err(TransportError::Fatal(m)) => return Err(Error::Transport(m)),
                Err(TransportError::Retryable(m)) => {
                    last_error = m;
                    if attempt < self.retry.max_attempts {
                        std::thread::sleep(self.retry.delay(attempt));
                    }
                }
            }
        }
        Err(Error::RetriesExhausted {
            attempts: self.retry.max_attempts,
            last_error,
        })
    }

    /// Executes a dialogue plan against one item.
    ///
    /// Round 2 carries the full round-1 exchange as history (user, assistant,
    /// new user) in addition to the template bindings.
    pub fn run_dialogue(
        &self,
        plan: &DialoguePlan,
        item: &EvalItem,
    ) -> std::result::Result<Transcript, Box<DialogueFailure>> {
        let mut transcript = Transcript {
            item_id: item.id.clone(),
            strategy: plan.strategy,
            rounds: Vec::new(),
        };
        let mut history: Vec<ChatMessage> = Vec::new();
        let mut first_prompt = String::new();
        let mut first_output = String::new();

        for (i, step) in plan.steps.iter().enumerate() {
            let round = i + 1;
            let fail = |error: Error, partial: Transcript| {
                Box::new(DialogueFailure {
                    error: Error::Round {
                        round,
                        source: Box::new(error),
                    },
                    partial,
                })
            };

            let result: Result<ChatMessage> = (|| {
                let mut bindings = item_bindings(item, step)?;
                if i > 0 {
                    bindings.extend(bind_second_round(plan, &first_prompt, &first_output)?);
                }
                let prompt = render(&step.template, &bindings)?;
                let mut content = Vec::new();
                if step.carries_attachments {
                    content.extend(attachment_parts(item, self.frames_per_video)?);
                }
                content.push(ContentPart::Text { text: prompt });
                Ok(ChatMessage {
                    role: Role::User,
                    content,
                })
            })();
            let user_message = match result {
                Ok(m) => m,
                Err(e) => return Err(fail(e, transcript)),
            };

            let mut request_messages = history.clone();
            request_messages.push(user_message.clone());
            let started = Instant::now();
            let outcome = match self.complete(request_messages.clone()) {
                Ok(o) => o,
                Err(e) => return Err(fail(e, transcript)),
            };
            transcript.rounds.push(Round {
                index: round,
                request_messages,
                response_text: outcome.text.clone(),
                latency_ms: started.elapsed().as_millis() as u64,
                token_usage: outcome.usage,
                cache_hit: outcome.cache_hit,
            });
            if i == 0 {
                first_prompt = user_message.text();
                first_output = outcome.text.clone();
            }
            history.push(user_message);
            history.push(ChatMessage::assistant_text(&outcome.text));
        }
        Ok(transcript)
    }

    /// Runs many plans with at most `concurrency` dialogues in flight,
    /// preserving input order in the output.
    pub fn run_many(
        &self,
        work: &[(DialoguePlan, EvalItem)],
    ) -> Vec<std::result::Result<Transcript, Box<DialogueFailure>>> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<std::result::Result<Transcript, Box<DialogueFailure>>>>> =
            Mutex::new((0..work.len()).map(|_| None).collect());
        let workers = self.concurrency.min(work.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= work.len() {
                        break;
                    }
                    let (plan, item) = &work[i];
                    let outcome = self.run_dialogue(plan, item);
                    results.lock().unwrap()[i] = Some(outcome);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|slot| slot.expect("every index filled"))
            .collect()
    }
}

/// Builds image content parts for an item's attachments: image files become
/// base64 data URIs, frame directories become the sampled frame sequence.
/// Inline text is a template binding, not a content part.
pub fn attachment_parts(item: &EvalItem, frames_per_video: u32) -> Result<Vec<ContentPart>> {
    let mut parts = Vec::new();
    for att in &item.attachments {
        match att.kind {
            AttachmentKind::InlineText => {}
            AttachmentKind::ImageFile => parts.push(image_part(att)?),
            AttachmentKind::FrameDir => {
                let dir = Path::new(&att.path_or_text);
                let files = list_frame_files(dir)?;
                let total = item.frame_count.ok_or_else(|| Error::InvalidItem {
                    id: item.id.clone(),
                    message: "video item without frame count".into(),
                })?;
                for index in sample_frame_indices(total, frames_per_video) {
                    let file = files.get(index as usize).ok_or_else(|| Error::InvalidItem {
                        id: item.id.clone(),
                        message: format!(
                            "frame index {index} out of range ({} files in {})",
                            files.len(),
                            dir.display()
                        ),
                    })?;
                    parts.push(data_uri_part(file, &att.media_type)?);
                }
            }
        }
    }
    Ok(parts)
}

fn image_part(att: &Attachment) -> Result<ContentPart> {
    data_uri_part(Path::new(&att.path_or_text), &att.media_type)
}

fn data_uri_part(path: &Path, media_type: &str) -> Result<ContentPart> {
    let bytes = std::fs::read(path)?;
    let media_type = if media_type.is_empty() { "image/png" } else { media_type };
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(ContentPart::ImageUrl {
        image_url: ImageUrl {
            url: format!("data:{media_type};base64,{encoded}"),
        },
    })
}

/// Scripted transport for tests and offline runs: replies are looked up by
/// substring match on the last user message, in script order.
pub struct ScriptedTransport {
    script: Vec<(String, String)>,
    fallback: Option<String>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    hold: Duration,
    failures_before_success: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedTransport {
    pub fn new(script: Vec<(String, String)>) -> Self {
        ScriptedTransport {
            script,
            fallback: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            hold: Duration::from_millis(0),
            failures_before_success: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn constant(reply: &str) -> Self {
        let mut t = Self::new(Vec::new());
        t.fallback = Some(reply.to_string());
        t
    }

    pub fn with_fallback(mut self, reply: &str) -> Self {
        self.fallback = Some(reply.to_string());
        self
    }

    /// Holds each call open for `hold` so concurrency tests can observe
    /// overlap.
    pub fn with_hold(mut self, hold: Duration) -> Self {
        self.hold = hold;
        self
    }

    pub fn failing_first(self, failures: usize) -> Self {
        self.failures_before_success.store(failures, Ordering::SeqCst);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_concurrency(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl ChatTransport for ScriptedTransport {
    fn send(
        &self,
        _endpoint: &ModelEndpoint,
        request: &ChatRequest,
    ) -> std::result::Result<TransportResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(current, Ordering::SeqCst);
        if !self.hold.is_zero() {
            std::thread::sleep(self.hold);
        }
        self.requests.lock().unwrap().push(request.clone());
        let result = (|| {
            let remaining = self.failures_before_success.load(Ordering::SeqCst);
            if remaining > 0 {
                self.failures_before_success.store(remaining - 1, Ordering::SeqCst);
                return Err(TransportError::Retryable("HTTP 429".into()));
            }
            let last_user = request
                .messages
                .iter()
                .rev()
                .find(|m| m.role == Role::User)
                .map(|m| m.text())
                .unwrap_or_default();
            for (needle, reply) in &self.script {
                if last_user.contains(needle.as_str()) {
                    return Ok(TransportResponse {
                        content: reply.clone(),
                        usage: None,
                    });
                }
            }
            match &self.fallback {
                Some(reply) => Ok(TransportResponse {
                    content: reply.clone(),
                    usage: None,
                }),
                None => Err(TransportError::Fatal(format!(
                    "no scripted reply matches prompt: {last_user:.60?}"
                ))),
            }
        })();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EvalConfig, GoldAnswer, MatchMode, Modality, TaskKind};
    use crate::prompting::{plan, Strategy, TemplateLibrary};
    use std::io::{Read as _, Write as _};
    use std::net::TcpListener;

    fn endpoint() -> ModelEndpoint {
        ModelEndpoint::new("http://127.0.0.1:9", "test-model").unwrap()
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 5,
            base: Duration::from_millis(1),
            factor: 2.0,
            jitter: 0.2,
        }
    }

    fn text_item() -> EvalItem {
        EvalItem {
            id: "i1".into(),
            task_kind: TaskKind::Mcq,
            eval_config: EvalConfig::General,
            question_text: Some("Pick one.".into()),
            options: Some(vec!["x".into(), "y".into()]),
            attachments: vec![],
            modality: Modality::Text,
            gold: GoldAnswer {
                canonical: "A".into(),
                aliases: vec![],
                match_mode: MatchMode::Letter,
            },
            category: "trivia".into(),
            subtask: "misc".into(),
            pair_id: None,
            domain_suffix: None,
            frame_count: None,
        }
    }

    #[test]
    fn endpoint_validation() {
        assert!(ModelEndpoint::new("ftp://x", "m").is_err());
        assert!(ModelEndpoint::new("http://x", "").is_err());
        let e = ModelEndpoint::new("http://host:9999/v1/", "m").unwrap();
        assert_eq!(e.base_url, "http://host:9999/v1");
    }

    #[test]
    fn scripted_reply_passes_through() {
        let transport = Arc::new(ScriptedTransport::constant("X"));
        let client = Client::new(endpoint(), transport);
        let out = client.complete(vec![ChatMessage::user_text("hi")]).unwrap();
        assert_eq!(out.text, "X");
        assert!(!out.cache_hit);
    }

    #[test]
    fn empty_content_is_fatal() {
        let transport = Arc::new(ScriptedTransport::constant(""));
        let client = Client::new(endpoint(), transport);
        assert!(matches!(
            client.complete(vec![ChatMessage::user_text("hi")]),
            Err(Error::EmptyResponse)
        ));
    }

    #[test]
    fn retries_transient_failures_then_succeeds() {
        let transport = Arc::new(ScriptedTransport::constant("ok").failing_first(2));
        let client = Client::new(endpoint(), transport.clone()).with_retry(fast_retry());
        let out = client.complete(vec![ChatMessage::user_text("hi")]).unwrap();
        assert_eq!(out.text, "ok");
        assert_eq!(transport.calls(), 3);
    }

    #[test]
    fn exhausted_retries_reports_attempts() {
        let transport = Arc::new(ScriptedTransport::constant("ok").failing_first(99));
        let client = Client::new(endpoint(), transport.clone()).with_retry(fast_retry());
        match client.complete(vec![ChatMessage::user_text("hi")]) {
            Err(Error::RetriesExhausted { attempts, .. }) => assert_eq!(attempts, 5),
            other => panic!("unexpected: {other:?}"),
        }
        assert_eq!(transport.calls(), 5);
    }

    #[test]
    fn cache_second_call_skips_network() {
        let dir = tempfile::tempdir().unwrap();
        let transport = Arc::new(ScriptedTransport::constant("cached-answer"));
        let client = Client::new(endpoint(), transport.clone())
            .with_cache(ResponseCache::new(dir.path()).unwrap());
        let messages = vec![ChatMessage::user_text("same prompt")];
        let first = client.complete(messages.clone()).unwrap();
        let second = client.complete(messages).unwrap();
        assert!(!first.cache_hit && second.cache_hit);
        assert_eq!(second.text, "cached-answer");
        assert_eq!(transport.calls(), 1);
    }

    #[test]
    fn cache_key_changes_with_any_request_byte() {
        let base = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user_text("prompt")],
            temperature: 0.0,
            max_tokens: 100,
        };
        let mut other = base.clone();
        other.messages = vec![ChatMessage::user_text("prompt!")];
        assert_ne!(ResponseCache::key(&base), ResponseCache::key(&other));
        let mut temp = base.clone();
        temp.temperature = 0.5;
        assert_ne!(ResponseCache::key(&base), ResponseCache::key(&temp));
        assert_eq!(ResponseCache::key(&base), ResponseCache::key(&base.clone()));
    }

    #[test]
    fn cot_dialogue_is_one_round() {
        let lib = TemplateLibrary::bundled().unwrap();
        let item = text_item();
        let p = plan(&lib, Strategy::cot(), &item).unwrap();
        let transport = Arc::new(ScriptedTransport::constant(
            "<answer>A</answer><confidence>80%</confidence>",
        ));
        let client = Client::new(endpoint(), transport);
        let transcript = client.run_dialogue(&p, &item).unwrap();
        assert_eq!(transcript.rounds.len(), 1);
        assert!(transcript.rounds[0].request_messages[0]
            .text()
            .contains("Pick one."));
    }

    #[test]
    fn reflection_round_two_history_and_bindings() {
        let lib = TemplateLibrary::bundled().unwrap();
        let item = text_item();
        let p = plan(&lib, Strategy::self_reflection(), &item).unwrap();
        let answer = "<answer>A</answer>";
        let transport = Arc::new(
            ScriptedTransport::new(vec![(
                "final confidence score".into(),
                "<confidence>70%</confidence>".into(),
            )])
            .with_fallback(answer),
        );
        let client = Client::new(endpoint(), transport);
        let transcript = client.run_dialogue(&p, &item).unwrap();
        assert_eq!(transcript.rounds.len(), 2);
        let round2 = &transcript.rounds[1];
        // full round-1 exchange precedes the new user message
        assert_eq!(round2.request_messages.len(), 3);
        assert_eq!(round2.request_messages[1].role, Role::Assistant);
        assert_eq!(round2.request_messages[1].text(), answer);
        // round-2 prompt embeds the round-1 prompt and solution
        let prompt2 = round2.request_messages[2].text();
        assert!(prompt2.contains("Pick one."));
        assert!(prompt2.contains(answer));
    }

    #[test]
    fn failure_on_round_two_preserves_round_one() {
        let lib = TemplateLibrary::bundled().unwrap();
        let item = text_item();
        let p = plan(&lib, Strategy::self_reflection(), &item).unwrap();
        let failing = Arc::new(FailAfter {
            succeed: 1,
            reply: "<answer>A</answer>".into(),
            seen: AtomicUsize::new(0),
        });
        let client = Client::new(endpoint(), failing).with_retry(fast_retry());
        let failure = client.run_dialogue(&p, &item).unwrap_err();
        match &failure.error {
            Error::Round { round, .. } => assert_eq!(*round, 2),
            other => panic!("unexpected: {other}"),
        }
        assert_eq!(failure.partial.rounds.len(), 1);
    }

    struct FailAfter {
        succeed: usize,
        reply: String,
        seen: AtomicUsize,
    }

    impl ChatTransport for FailAfter {
        fn send(
            &self,
            _endpoint: &ModelEndpoint,
            _request: &ChatRequest,
        ) -> std::result::Result<TransportResponse, TransportError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.succeed {
                Ok(TransportResponse { content: self.reply.clone(), usage: None })
            } else {
                Err(TransportError::Fatal("scripted failure".into()))
            }
        }
    }

    #[test]
    fn run_many_preserves_order_and_bounds_concurrency() {
        let lib = TemplateLibrary::bundled().unwrap();
        let transport = Arc::new(
            ScriptedTransport::constant("<answer>A</answer><confidence>80%</confidence>")
                .with_hold(Duration::from_millis(15)),
        );
        let client = Client::new(endpoint(), transport.clone()).with_concurrency(3);
        let work: Vec<_> = (0..12)
            .map(|i| {
                let mut item = text_item();
                item.id = format!("i{i}");
                let p = plan(&lib, Strategy::cot(), &item).unwrap();
                (p, item)
            })
            .collect();
        let results = client.run_many(&work);
        assert_eq!(results.len(), 12);
        for (i, r) in results.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().item_id, format!("i{i}"));
        }
        assert!(transport.peak_concurrency() <= 3);
        assert!(transport.peak_concurrency() >= 2, "holds should overlap");
    }

    #[test]
    fn image_attachment_becomes_data_uri() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("pic.png");
        std::fs::write(&png, b"\x89PNG\r\n\x1a\nfakebody").unwrap();
        let mut item = text_item();
        item.modality = Modality::Image;
        item.attachments = vec![Attachment {
            kind: AttachmentKind::ImageFile,
            path_or_text: png.to_string_lossy().into_owned(),
            media_type: "image/png".into(),
        }];
        let parts = attachment_parts(&item, 32).unwrap();
        assert_eq!(parts.len(), 1);
        match &parts[0] {
            ContentPart::ImageUrl { image_url } => {
                assert!(image_url.url.starts_with("data:image/png;base64,"));
            }
            other => panic!("unexpected part: {other:?}"),
        }
    }

    #[test]
    fn frame_dir_expands_to_sampled_frames() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..8 {
            std::fs::write(dir.path().join(format!("frame_{i:03}.png")), [i as u8]).unwrap();
        }
        std::fs::write(dir.path().join("frames.count"), "8").unwrap();
        let mut item = text_item();
        item.modality = Modality::Video;
        item.frame_count = Some(8);
        item.attachments = vec![Attachment {
            kind: AttachmentKind::FrameDir,
            path_or_text: dir.path().to_string_lossy().into_owned(),
            media_type: "image/png".into(),
        }];
        let parts = attachment_parts(&item, 4).unwrap();
        assert_eq!(parts.len(), 4); // frames 0, 2, 4, 6
        let parts = attachment_parts(&item, 16).unwrap();
        assert_eq!(parts.len(), 16); // duplicates allowed
    }

    fn one_shot_http_server(status_line: &'static str, body: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 65536];
                let _ = stream.read(&mut buf);
                let response = format!(
                    "{status_line}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    #[test]
    fn http_transport_parses_first_choice() {
        let base = one_shot_http_server(
            "HTTP/1.1 200 OK",
            r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":3,"completion_tokens":1,"total_tokens":4}}"#,
        );
        let endpoint = ModelEndpoint::new(&base, "m").unwrap();
        let transport = HttpTransport::new();
        let request = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user_text("hi")],
            temperature: 0.0,
            max_tokens: 10,
        };
        let response = transport.send(&endpoint, &request).unwrap();
        assert_eq!(response.content, "hello");
        assert_eq!(response.usage.unwrap().total_tokens, 4);
    }

    #[test]
    fn http_transport_classifies_statuses() {
        let auth = one_shot_http_server("HTTP/1.1 401 Unauthorized", "{}");
        let endpoint = ModelEndpoint::new(&auth, "m").unwrap();
        let request = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user_text("hi")],
            temperature: 0.0,
            max_tokens: 10,
        };
        match HttpTransport::new().send(&endpoint, &request) {
            Err(TransportError::Auth(_)) => {}
            other => panic!("unexpected: {other:?}"),
        }

        let throttled = one_shot_http_server("HTTP/1.1 429 Too Many Requests", "{}");
        let endpoint = ModelEndpoint::new(&throttled, "m").unwrap();
        match HttpTransport::new().send(&endpoint, &request) {
            Err(TransportError::Retryable(_)) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn content_part_wire_shape() {
        let part = ContentPart::ImageUrl {
            image_url: ImageUrl { url: "data:image/png;base64,AA==".into() },
        };
        let json = serde_json::to_value(&part).unwrap();
        assert_eq!(json["type"], "image_url");
        assert_eq!(json["image_url"]["url"], "data:image/png;base64,AA==");
        let text = ContentPart::Text { text: "hi".into() };
        assert_eq!(serde_json::to_value(&text).unwrap()["type"], "text");
    }
}
