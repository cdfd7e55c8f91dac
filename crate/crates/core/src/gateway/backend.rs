//! Completion backends: live HTTP, deterministic replay, scripted fixtures.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, GatewayError, GenParams, Transcript};

/// Where completions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Replay,
    Scripted,
}

pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &str, params: &GenParams) -> Result<String, GatewayError>;
    fn kind(&self) -> BackendKind;
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// Replays a recorded transcript log. Lookup is keyed by the prompt digest;
/// a miss is an error, never a silent live call.
pub struct ReplayBackend {
    by_hash: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn new(transcripts: impl IntoIterator<Item = Transcript>) -> Self {
        let by_hash = transcripts
            .into_iter()
            .map(|t| (t.prompt_hash, t.completion))
            .collect();
        ReplayBackend { by_hash }
    }

    /// Load from a JSON Lines transcript store.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::BackendUnavailable(format!("{}: {e}", path.display())))?;
        let mut transcripts = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let t: Transcript = serde_json::from_str(line)
                .map_err(|e| GatewayError::BackendUnavailable(format!("bad transcript line: {e}")))?;
            transcripts.push(t);
        }
        Ok(Self::new(transcripts))
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, prompt: &str, _params: &GenParams) -> Result<String, GatewayError> {
        let hash = sha256_hex(prompt.as_bytes());
        self.by_hash
            .get(&hash)
            .cloned()
            .ok_or(GatewayError::ReplayMiss(hash))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }
}

// ---------------------------------------------------------------------------
// Scripted
// ---------------------------------------------------------------------------

/// One scripted rule: first rule whose `when_contains` anchors all occur in
/// the prompt wins. `completions` are consumed per call in order; the last
/// one repeats once the list is exhausted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    pub when_contains: Vec<String>,
    pub completions: Vec<String>,
}

/// Deterministic fixture backend for tests and offline demos.
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    hits: Mutex<Vec<usize>>, // per-rule call count
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let hits = Mutex::new(vec![0; rules.len()]);
        ScriptedBackend { rules, hits }
    }

    /// Load rules from a JSON Lines file, one `ScriptRule` per line.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::BackendUnavailable(format!("{}: {e}", path.display())))?;
        let mut rules = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let rule: ScriptRule = serde_json::from_str(line)
                .map_err(|e| GatewayError::BackendUnavailable(format!("bad script line: {e}")))?;
            rules.push(rule);
        }
        Ok(Self::new(rules))
    }

    /// Map a single exact prompt to a single completion.
    pub fn single(prompt: &str, completion: &str) -> Self {
        Self::new(vec![ScriptRule {
            when_contains: vec![prompt.to_string()],
            completions: vec![completion.to_string()],
        }])
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, prompt: &str, _params: &GenParams) -> Result<String, GatewayError> {
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.when_contains.iter().all(|needle| prompt.contains(needle)) {
                let mut hits = self.hits.lock().expect("script hits lock");
                let n = hits[i];
                hits[i] += 1;
                let idx = n.min(rule.completions.len().saturating_sub(1));
                return rule
                    .completions
                    .get(idx)
                    .cloned()
                    .ok_or_else(|| GatewayError::ReplayMiss("empty script rule".into()));
            }
        }
        Err(GatewayError::ReplayMiss(sha256_hex(prompt.as_bytes())))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }
}

/// Closure-backed backend for unit tests.
pub struct FnBackend<F: Fn(&str) -> Result<String, GatewayError> + Send + Sync>(pub F);

impl<F: Fn(&str) -> Result<String, GatewayError> + Send + Sync> Backend for FnBackend<F> {
    fn complete(&self, prompt: &str, _params: &GenParams) -> Result<String, GatewayError> {
        (self.0)(prompt)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }
}

// ---------------------------------------------------------------------------
// Live
// ---------------------------------------------------------------------------

/// Chat-completion HTTP backend. Base URL, model and API key come from the
/// environment so credentials never live in config files.
pub struct LiveBackend {
    base_url: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

pub const ENV_BASE_URL: &str = "INSTAR_API_BASE";
pub const ENV_API_KEY: &str = "INSTAR_API_KEY";

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    top_p: f64,
    frequency_penalty: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

impl LiveBackend {
    pub fn from_env(timeout: Duration) -> Result<Self, GatewayError> {
        let base_url = std::env::var(ENV_BASE_URL)
            .map_err(|_| GatewayError::BackendUnavailable(format!("{ENV_BASE_URL} not set")))?;
        let api_key = std::env::var(ENV_API_KEY)
            .map_err(|_| GatewayError::BackendUnavailable(format!("{ENV_API_KEY} not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        Ok(LiveBackend {
            base_url,
            api_key,
            client,
        })
    }

    fn request_once(&self, prompt: &str, params: &GenParams) -> Result<String, GatewayError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let body = ChatRequest {
            model: &params.model_name,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            top_p: params.top_p,
            frequency_penalty: params.frequency_penalty,
        };
        let resp = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e|

                if e.is_timeout() {
                    GatewayError::Timeout
                } else {
                    GatewayError::BackendUnavailable(e.to_string())
                })?;
        if !resp.status().is_success() {
            return Err(GatewayError::BackendUnavailable(format!(
                "HTTP {}",
                resp.status()
            )));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::BackendUnavailable("no choices in response".into()))
    }
}

impl Backend for LiveBackend {
    fn complete(&self, prompt: &str, params: &GenParams) -> Result<String, GatewayError> {
        // one retry with backoff before surfacing the failure
        match self.request_once(prompt, params) {
            Ok(out) => Ok(out),
            Err(GatewayError::Timeout) => Err(GatewayError::Timeout),
            Err(_) => {
                thread::sleep(Duration::from_millis(500));
                self.request_once(prompt, params)
            }
        }
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_exact_mapping() {
        let backend = ScriptedBackend::single("P", "out");
        assert_eq!(backend.complete("P", &GenParams::default()).unwrap(), "out");
    }

    #[test]
    fn scripted_miss_is_an_error() {
        let backend = ScriptedBackend::single("P", "out");
        assert!(matches!(
            backend.complete("Q", &GenParams::default()),
            Err(GatewayError::ReplayMiss(_))
        ));
    }

    #[test]
    fn scripted_sequences_consume_in_order() {
        let backend = ScriptedBackend::new(vec![ScriptRule {
            when_contains: vec!["score".into()],
            completions: vec!["70".into(), "80".into()],
        }]);
        let p = GenParams::default();
        assert_eq!(backend.complete("score this", &p).unwrap(), "70");
        assert_eq!(backend.complete("score this", &p).unwrap(), "80");
        // last completion repeats after exhaustion
        assert_eq!(backend.complete("score this", &p).unwrap(), "80");
    }

    #[test]
    fn replay_returns_recorded_completion() {
        let t = Transcript::for_test("the prompt", "the completion");
        let backend = ReplayBackend::new(vec![t]);
        assert_eq!(
            backend.complete("the prompt", &GenParams::default()).unwrap(),
            "the completion"
        );
        assert!(matches!(
            backend.complete("something else", &GenParams::default()),
            Err(GatewayError::ReplayMiss(_))
        ));
    }
}
