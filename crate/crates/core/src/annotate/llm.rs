//! Chat-completion client with retries, bounded concurrency and a
//! content-addressed response cache.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::prompts::{build_pair_prompt, build_search_prompt, parse_pair_response, parse_search_response};
use super::{AnnotationRecord, AnnotatorKind, Assignment, Prompt, SearchItem, SearchTemplate, Transcript, MAX_BATCH};
use crate::dataset::PairExample;
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "EAGLE_LLM_API_KEY";

fn default_temperature() -> f64 {
    0.0
}
fn default_in_flight() -> usize {
    4
}
fn default_attempts() -> u32 {
    5
}
fn default_backoff() -> u64 {
    500
}
fn default_timeout() -> u64 {
    120
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// First retry delay; doubles on each further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: default_temperature(),
            max_in_flight: default_in_flight(),
            max_attempts: default_attempts(),
            backoff_base_ms: default_backoff(),
            timeout_secs: default_timeout(),
            cache_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

/// One HTTP POST of a JSON body. `Err` means the request did not complete.
pub trait Transport: Send + Sync {
    fn post(&self, endpoint: &str, body: &Value) -> std::result::Result<TransportResponse, String>;
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn post(&self, endpoint: &str, body: &Value) -> std::result::Result<TransportResponse, String> {
        (**self).post(endpoint, body)
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpTransport {
    /// Reads the API key from `EAGLE_LLM_API_KEY`, if set.
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: &str, body: &Value) -> std::result::Result<TransportResponse, String> {
        let mut req = self.agent.post(endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(TransportResponse { status, body })
    }
}

pub struct LlmClient {
    config: LlmConfig,
    transport: Box<dyn Transport>,
    requests: AtomicUsize,
}

impl LlmClient {
    pub fn new(config: LlmConfig, transport: Box<dyn Transport>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            transport,
            requests: AtomicUsize::new(0),
        })
    }

    pub fn http(config: LlmConfig) -> Result<Self> {
        let t = HttpTransport::new(Duration::from_secs(config.timeout_secs));
        Self::new(config, Box::new(t))
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    /// Network requests issued so far, retries included.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    /// Hex digest naming the cache entry of a prompt.
    pub fn cache_key(&self, prompt: &Prompt) -> String {
        let mut h = Sha256::new();
        for part in [&self.config.model, &prompt.system, &prompt.user] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn cache_path(&self, prompt: &Prompt) -> Option<PathBuf> {
        self.config.cache_dir.as_ref().map(|d| d.join(self.cache_key(prompt)))
    }

    /// Response text of the first choice.
    pub fn complete(&self, prompt: &Prompt) -> std::result::Result<String, String> {
        if let Some(path) = self.cache_path(prompt) {
            if let Ok(body) = std::fs::read_to_string(&path) {
                match extract_content(&body) {
                    Ok(text) => return Ok(text),
                    Err(e) => log::warn!("ignoring unusable cache entry {}: {e}", path.display()),
                }
            }
        }
        let body = self.fetch(prompt)?;
        let text = extract_content(&body)?;
        if let Some(path) = self.cache_path(prompt) {
            if let Err(e) = write_atomic(&path, &body) {
                log::warn!("cache write {} failed: {e}", path.display());
            }
        }
        Ok(text)
    }

    fn fetch(&self, prompt: &Prompt) -> std::result::Result<String, String> {
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
        });
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            self.requests.fetch_add(1, Ordering::Relaxed);
            match self.transport.post(&self.config.endpoint, &body) {
                Ok(r) if (200..300).contains(&r.status) => return Ok(r.body),
                Ok(r) if r.status == 429 || r.status >= 500 => {
                    last = format!("HTTP {}", r.status);
                }
                Ok(r) => return Err(format!("HTTP {}: {}", r.status, truncate(&r.body))),
                Err(e) => last = e,
            }
            log::debug!("attempt {} failed: {last}", attempt + 1);
        }
        Err(format!("gave up after {} attempts: {last}", self.config.max_attempts))
    }

    /// Completes all prompts with at most `max_in_flight` outstanding; the
    /// result vector follows the input order.
    pub fn complete_all(&self, prompts: &[Prompt]) -> Vec<std::result::Result<String, String>> {
        let slots: Vec<Mutex<Option<std::result::Result<String, String>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(prompts.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let r = self.complete(&prompts[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn extract_content(body: &str) -> std::result::Result<String, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("malformed response body: {e}"))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| "response has no choices[0].message.content".to_string())
}

fn write_atomic(path: &std::path::Path, body: &str) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(std::path::Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, body.as_bytes())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Annotates pairs in batches of ten (the last may be shorter). Fails with
/// the first failed batch, in input order, after all requests settle.
pub fn annotate_llm_pairs(examples: &[PairExample], client: &LlmClient) -> Result<Vec<AnnotationRecord>> {
    let batches: Vec<&[PairExample]> = examples.chunks(MAX_BATCH).collect();
    let prompts: Vec<Prompt> = batches.iter().map(|b| build_pair_prompt(b)).collect::<Result<_>>()?;
    let responses = client.complete_all(&prompts);
    let kind = AnnotatorKind::Llm {
        model: client.config.model.clone(),
    };
    let mut out = Vec::with_capacity(examples.len());
    for ((batch, prompt), resp) in batches.iter().zip(&prompts).zip(responses) {
        let raw = resp.map_err(|reason| Error::AnnotationFailed {
            ids: batch.iter().map(|e| e.id.clone()).collect(),
            reason,
        })?;
        let parsed = parse_pair_response(&raw, batch.len());
        for (ex, label) in batch.iter().zip(parsed.value) {
            out.push(AnnotationRecord {
                id: ex.id.clone(),
                assignment: Assignment::Pair(label),
                annotator: kind.clone(),
                transcript: Some(Transcript {
                    system: prompt.system.clone(),
                    user: prompt.user.clone(),
                    response: raw.clone(),
                }),
            });
        }
    }
    Ok(out)
}

/// One request per query over its candidates; the chosen candidate gets 1,
/// the others 0.
pub fn annotate_llm_search(
    items: &[SearchItem],
    template: SearchTemplate,
    client: &LlmClient,
) -> Result<Vec<AnnotationRecord>> {
    let prompts = items
        .iter()
        .map(|it| build_search_prompt(&it.text, &it.candidates, template))
        .collect::<Result<Vec<_>>>()?;
    let plain: Vec<Prompt> = prompts.iter().map(|p| p.prompt.clone()).collect();
    let responses = client.complete_all(&plain);
    let kind = AnnotatorKind::Llm {
        model: client.config.model.clone(),
    };
    items
        .iter()
        .zip(&prompts)
        .zip(responses)
        .map(|((it, sp), resp)| {
            let raw = resp.map_err(|reason| Error::AnnotationFailed {
                ids: vec![it.id.clone()],
                reason,
            })?;
            let pick = parse_search_response(&raw, sp.order.len()).value;
            let map: BTreeMap<String, u8> = sp
                .order
                .iter()
                .enumerate()
                .map(|(r, l)| (l.clone(), u8::from(pick == Some(r + 1))))
                .collect();
            Ok(AnnotationRecord {
                id: it.id.clone(),
                assignment: Assignment::Search(map),
                annotator: kind.clone(),
                transcript: Some(Transcript {
                    system: sp.prompt.system.clone(),
                    user: sp.prompt.user.clone(),
                    response: raw,
                }),
            })
        })
        .collect()
}
