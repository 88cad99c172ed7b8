//! Progressive prompt generation.
//!
//! A user intent is decomposed into one high-level prompt (layout, style,
//! topic), one low-level prompt per region (color, texture, objects) and one
//! global negative prompt. The decomposition comes from a chat-completions
//! style LLM endpoint, or from a fixed offline template for hermetic runs.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid request: {0}")]
    Request(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("response violates the prompt schema: {reason}")]
    Schema { reason: String, raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionPrompt {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressivePrompt {
    pub high_level: String,
    pub regions: Vec<RegionPrompt>,
    pub negative: String,
}

impl ProgressivePrompt {
    /// Region indices must be exactly `0..n`, each once; no text may be blank.
    pub fn validate(&self, n: usize) -> Result<(), String> {
        if self.high_level.trim().is_empty() {
            return Err("high_level is empty".into());
        }
        if self.negative.trim().is_empty() {
            return Err("negative is empty".into());
        }
        if self.regions.len() != n {
            return Err(format!("expected {n} regions, got {}", self.regions.len()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.regions {
            if r.index >= n {
                return Err(format!("region index {} out of range 0..{n}", r.index));
            }
            if !seen.insert(r.index) {
                return Err(format!("duplicate region index {}", r.index));
            }
            if r.text.trim().is_empty() {
                return Err(format!("region {} text is empty", r.index));
            }
        }
        Ok(())
    }

    /// Region texts ordered by index.
    pub fn region_texts(&self) -> Vec<&str> {
        let mut r: Vec<&RegionPrompt> = self.regions.iter().collect();
        r.sort_by_key(|r| r.index);
        r.into_iter().map(|r| r.text.as_str()).collect()
    }
}

/// High-level prompt followed by the region prompts in index order, joined
/// with ", ". Used as the single global instruction of baseline runs.
pub fn merge_prompts(p: &ProgressivePrompt) -> String {
    std::iter::once(p.high_level.as_str())
        .chain(p.region_texts())
        .collect::<Vec<_>>()
        .join(", ")
}

const REGION_DETAILS: [&str; 9] = [
    "soft warm light and fine surface texture",
    "cool tones with crisp edges",
    "rich saturated colors and glossy highlights",
    "muted earthy palette with matte finish",
    "dramatic contrast and deep shadows",
    "pastel hues with gentle gradients",
    "intricate ornamental detail",
    "weathered materials and natural grain",
    "luminous atmosphere with light haze",
];

pub const OFFLINE_NEGATIVE: &str = "blurry, low quality, distorted, watermark, text, artifacts";

/// Deterministic stand-in for the LLM.
pub fn offline_template(user_intent: &str, n: usize) -> ProgressivePrompt {
    let regions = (0..n)
        .map(|i| {
            let detail = REGION_DETAILS[i % REGION_DETAILS.len()];
            let text = if i < REGION_DETAILS.len() {
                format!("{user_intent}, {detail}")
            } else {
                format!("{user_intent}, {detail} (variant {})", i / REGION_DETAILS.len())
            };
            RegionPrompt { index: i, text }
        })
        .collect();
    ProgressivePrompt {
        high_level: user_intent.to_string(),
        regions,
        negative: OFFLINE_NEGATIVE.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself
    /// is never stored in configuration.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_key_env() -> String {
    "LLM_API_KEY".into()
}
fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> usize {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_concurrency() -> usize {
    2
}

impl LlmClientConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        LlmClientConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            max_concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(PromptError::Request("timeout_secs must be > 0".into()));
        }
        if self.max_concurrency == 0 {
            return Err(PromptError::Request("max_concurrency must be ≥ 1".into()));
        }
        if self.endpoint.is_empty() {
            return Err(PromptError::Request("endpoint is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Blocking HTTP POST. Errors are connection-level failures; HTTP error
/// statuses come back as responses.
pub trait Transport: Send + Sync {
    fn post(&self, req: &HttpRequest) -> Result<HttpResponse, String>;
}

/// Transport backed by `ureq`.
#[derive(Debug, Default, Clone, Copy)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post(&self, req: &HttpRequest) -> Result<HttpResponse, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(req.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut builder = agent.post(&req.url);
        for (k, v) in &req.headers {
            builder = builder.header(k.as_str(), v.as_str());
        }
        let mut resp = builder.send(req.body.as_str()).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

pub const INSTRUCTION_TEMPLATE: &str = "You decompose an image request into progressive prompts for \
regional image generation. Respond ONLY with one JSON object, no prose and no code fences, of the form \
{\"high_level\": string, \"regions\": [{\"index\": integer, \"text\": string}], \"negative\": string}. \
high_level describes the overall content, topic, layout and style. regions holds exactly the requested \
number of entries with indices 0..N-1 in spatial order; each text gives low-level details for that \
region: colors, textures, materials, objects. negative lists undesired features for the whole image.";

fn user_message(intent: &str, n: usize) -> String {
    format!("Image request: {intent}\nNumber of regions: {n}")
}

fn is_transient(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

fn extract_content(body: &str) -> Result<String, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| "response lacks choices[0].message.content".to_string())
}

/// Parse and validate the model's reply. Markdown code fences around the
/// object are tolerated.
pub fn parse_progressive(content: &str, n: usize) -> Result<ProgressivePrompt, String> {
    let trimmed = content.trim();
    let unfenced = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed)
        .trim();
    let p: ProgressivePrompt = serde_json::from_str(unfenced).map_err(|e| e.to_string())?;
    p.validate(n)?;
    Ok(p)
}

struct Client<'a> {
    cfg: &'a LlmClientConfig,
    transport: &'a dyn Transport,
}

impl Client<'_> {
    fn headers(&self) -> Vec<(String, String)> {
        let mut h = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            if !key.is_empty() {
                h.push(("Authorization".to_string(), format!("Bearer {key}")));
            }
        }
        h
    }

    /// POST with retries on connection errors, 429 and 5xx. Returns the body
    /// of the first 2xx response.
    fn call(&self, messages: &[Value]) -> Result<String, PromptError> {
        let body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": 0,
        });
        let req = HttpRequest {
            url: self.cfg.endpoint.clone(),
            headers: self.headers(),
            body: body.to_string(),
            timeout: Duration::from_secs_f64(self.cfg.timeout_secs),
        };
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.transport.post(&req) {
                Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp.body),
                Ok(resp) if is_transient(resp.status) => {
                    last = format!("HTTP {}: {}", resp.status, resp.body);
                }
                Ok(resp) => {
                    return Err(PromptError::Transport {
                        attempts: attempt + 1,
                        message: format!("HTTP {}: {}", resp.status, resp.body),
                    })
                }
                Err(e) => last = e,
            }
        }
        Err(PromptError::Transport {
            attempts,
            message: last,
        })
    }
}

/// Ask the LLM for a progressive prompt with `n` regions.
///
/// If the first reply does not parse or violates the schema, the reply is
/// sent back once with a correction request. A second failure is a schema
/// error carrying the raw reply.
pub fn generate_prompts(
    user_intent: &str,
    n: usize,
    cfg: &LlmClientConfig,
    transport: &dyn Transport,
) -> Result<ProgressivePrompt, PromptError> {
    if n == 0 {
        return Err(PromptError::Request("region count must be ≥ 1".into()));
    }
    cfg.validate()?;
    let client = Client { cfg, transport };
    let mut messages = vec![
        json!({"role": "system", "content": INSTRUCTION_TEMPLATE}),
        json!({"role": "user", "content": user_message(user_intent, n)}),
    ];
    let raw = client.call(&messages)?;
    let (content, reason) = match extract_content(&raw) {
        Ok(content) => match parse_progressive(&content, n) {
            Ok(p) => return Ok(p),
            Err(reason) => (content, reason),
        },
        Err(reason) => return Err(PromptError::Schema { reason, raw }),
    };

    messages.push(json!({"role": "assistant", "content": content}));
    messages.push(json!({
        "role": "user",
        "content": format!(
            "That reply is invalid ({reason}). Reply again with only the corrected JSON object \
             for {n} regions."
        ),
    }));
    let raw = client.call(&messages)?;
    let content = extract_content(&raw).map_err(|reason| PromptError::Schema {
        reason,
        raw: raw.clone(),
    })?;
    parse_progressive(&content, n).map_err(|reason| PromptError::Schema { reason, raw: content })
}

/// Run several independent requests with at most `cfg.max_concurrency` in
/// flight. Results are returned in request order.
pub fn generate_many(
    requests: &[(String, usize)],
    cfg: &LlmClientConfig,
    transport: &dyn Transport,
) -> Vec<Result<ProgressivePrompt, PromptError>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ProgressivePrompt, PromptError>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    let workers = cfg.max_concurrency.max(1).min(requests.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((intent, n)) = requests.get(i) else { break };
                let r = generate_prompts(intent, *n, cfg, transport);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every request ran"))
        .collect()
}
