//! Chat-completions transport.
//!
//! [`Gateway`] builds the request body and bounds the number of requests in
//! flight; a [`Transport`] moves the body over the wire (HTTP) or answers it
//! from a script ([`MockTransport`]).

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::prompt::ChatMessage;
use crate::reply::ReplySchema;

/// Which request field carries the guided-decoding schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaField {
    /// OpenAI-style `response_format: {type: json_schema, ...}`.
    #[default]
    ResponseFormat,
    /// `guided_json`, the vLLM extension field.
    GuidedJson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 0.7,
            max_tokens: 512,
        }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub request_timeout_s: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub schema_field: SchemaField,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_concurrency() -> usize {
    8
}

impl fmt::Debug for GatewayConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GatewayConfig")
            .field("endpoint_url", &self.endpoint_url)
            .field("model_name", &self.model_name)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("request_timeout_s", &self.request_timeout_s)
            .field("max_concurrent_requests", &self.max_concurrent_requests)
            .field("sampling", &self.sampling)
            .field("schema_field", &self.schema_field)
            .finish()
    }
}

pub const ENV_ENDPOINT: &str = "LLM_ENDPOINT";
pub const ENV_MODEL: &str = "LLM_MODEL";
pub const ENV_API_KEY: &str = "LLM_API_KEY";

impl GatewayConfig {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        GatewayConfig {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            api_key: None,
            request_timeout_s: default_timeout(),
            max_concurrent_requests: default_concurrency(),
            sampling: Sampling::default(),
            schema_field: SchemaField::default(),
        }
    }

    /// Reads `LLM_ENDPOINT`, `LLM_MODEL` and the optional `LLM_API_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let endpoint = get(ENV_ENDPOINT).ok_or_else(|| GatewayError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = get(ENV_MODEL).ok_or_else(|| GatewayError::Config(format!("{ENV_MODEL} is not set")))?;
        let mut config = GatewayConfig::new(endpoint, model);
        config.api_key = get(ENV_API_KEY);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_concurrent_requests == 0 {
            return Err(GatewayError::Config(
                "max_concurrent_requests must be at least 1".into(),
            ));
        }
        if self.request_timeout_s.is_nan() || self.request_timeout_s <= 0.0 {
            return Err(GatewayError::Config("request_timeout_s must be positive".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.endpoint_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("mock script exhausted")]
    MockExhausted,
    #[error("gateway configuration: {0}")]
    Config(String),
}

/// Request body with keys in canonical (sorted) order.
pub fn request_body(config: &GatewayConfig, messages: &[ChatMessage], schema: Option<&ReplySchema>) -> Value {
    let mut body = json!({
        "model": config.model_name,
        "messages": messages,
        "temperature": config.sampling.temperature,
        "max_tokens": config.sampling.max_tokens,
        "stream": false,
    });
    if let Some(s) = schema {
        let obj = body.as_object_mut().expect("object literal");
        match config.schema_field {
            SchemaField::ResponseFormat => {
                obj.insert(
                    "response_format".into(),
                    json!({
                        "type": "json_schema",
                        "json_schema": {"name": s.name, "schema": s.schema, "strict": true}
                    }),
                );
            }
            SchemaField::GuidedJson => {
                obj.insert("guided_json".into(), s.schema.clone());
            }
        }
    }
    body
}

/// Moves one request body to a model and returns the assistant's text.
pub trait Transport: Send + Sync {
    fn send(&self, body: &Value) -> Result<String, GatewayError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_s))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(HttpTransport {
            client,
            url: config.completions_url(),
            api_key: config.api_key.clone(),
        })
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(300).collect()
}

/// `choices[0].message.content` of a chat-completions response.
pub fn extract_content(response: &Value) -> Result<String, GatewayError> {
    response
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::MalformedResponse(excerpt(&response.to_string())))
}

impl Transport for HttpTransport {
    fn send(&self, body: &Value) -> Result<String, GatewayError> {
        let mut req = self
            .client
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(serde_json::to_vec(body).expect("json value serializes"));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Network(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Network(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                status: status.as_u16(),
                body: excerpt(&text),
            });
        }
        let json: Value = serde_json::from_str(&text).map_err(|_| GatewayError::MalformedResponse(excerpt(&text)))?;
        extract_content(&json)
    }
}

/// Counting semaphore bounding requests in flight.
struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared handle for talking to one model. Safe to use from many threads.
pub struct Gateway {
    config: GatewayConfig,
    transport: Box<dyn Transport>,
    limiter: Limiter,
    calls: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("calls", &self.calls.load(Ordering::Relaxed))
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn with_transport(config: GatewayConfig, transport: Box<dyn Transport>) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Gateway {
            limiter: Limiter {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                max: config.max_concurrent_requests,
            },
            config,
            transport,
            calls: AtomicU64::new(0),
        })
    }

    pub fn http(config: GatewayConfig) -> Result<Self, GatewayError> {
        let transport = HttpTransport::new(&config)?;
        Self::with_transport(config, Box::new(transport))
    }

    /// A gateway answering from `script`, plus a handle to inspect what it was asked.
    pub fn mock(config: GatewayConfig, script: Vec<(Matcher, MockReply)>) -> Result<(Self, MockHandle), GatewayError> {
        let (transport, handle) = install_mock(script);
        Ok((Self::with_transport(config, Box::new(transport))?, handle))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Number of `complete` calls issued so far.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, messages: &[ChatMessage], schema: Option<&ReplySchema>) -> Result<String, GatewayError> {
        let body = request_body(&self.config, messages, schema);
        let _permit = self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.transport.send(&body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    Any,
    /// Matches when any message content contains the text.
    Contains(String),
}

impl Matcher {
    fn matches(&self, body: &Value) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Contains(needle) => body["messages"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|m| m["content"].as_str())
                .any(|c| c.contains(needle.as_str())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockReply {
    Text(String),
    Error(GatewayError),
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }
}

type Responder = dyn Fn(&Value) -> Result<String, GatewayError> + Send + Sync;

/// Scripted transport. Each call is served by the first unused script entry
/// whose matcher accepts the request; with a responder, calls are answered
/// by a function instead.
pub struct MockTransport {
    script: Mutex<Vec<Option<(Matcher, MockReply)>>>,
    responder: Option<Box<Responder>>,
    log: Arc<Mutex<Vec<Value>>>,
}

#[derive(Debug, Clone, Default)]
pub struct MockHandle {
    log: Arc<Mutex<Vec<Value>>>,
}

impl MockHandle {
    /// Every request body received, in arrival order.
    pub fn requests(&self) -> Vec<Value> {
        self.log.lock().expect("mock log").clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().expect("mock log").len()
    }
}

pub fn install_mock(script: Vec<(Matcher, MockReply)>) -> (MockTransport, MockHandle) {
    let log = Arc::new(Mutex::new(Vec::new()));
    (
        MockTransport {
            script: Mutex::new(script.into_iter().map(Some).collect()),
            responder: None,
            log: log.clone(),
        },
        MockHandle { log },
    )
}

impl MockTransport {
    pub fn from_fn<F>(f: F) -> (Self, MockHandle)
    where
        F: Fn(&Value) -> Result<String, GatewayError> + Send + Sync + 'static,
    {
        let log = Arc::new(Mutex::new(Vec::new()));
        (
            MockTransport {
                script: Mutex::new(Vec::new()),
                responder: Some(Box::new(f)),
                log: log.clone(),
            },
            MockHandle { log },
        )
    }
}

impl Transport for MockTransport {
    fn send(&self, body: &Value) -> Result<String, GatewayError> {
        self.log.lock().expect("mock log").push(body.clone());
        if let Some(f) = &self.responder {
            return f(body);
        }
        let mut script = self.script.lock().expect("mock script");
        let slot = script
            .iter_mut()
            .find(|e| e.as_ref().is_some_and(|(m, _)| m.matches(body)))
            .ok_or(GatewayError::MockExhausted)?;
        match slot.take().expect("checked above").1 {
            MockReply::Text(t) => Ok(t),
            MockReply::Error(e) => Err(e),
        }
    }
}
