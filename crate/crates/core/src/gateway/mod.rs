//! Uniform interface to text-completion backends, plus prompt rendering and
//! code-block extraction. Every completion is recorded as a [`Transcript`] in
//! an append-only log so any run can be replayed byte-for-byte.

mod backend;
mod extract;
mod prompts;

pub use backend::{
    Backend, BackendKind, FnBackend, LiveBackend, ReplayBackend, ScriptRule, ScriptedBackend,
    ENV_API_KEY, ENV_BASE_URL,
};
pub use extract::extract_code_block;
pub use prompts::{
    bindings, PromptLibrary, PromptTemplate, BACKBONE, BACKTRANSLATE, CORRECTION, FIX_EXPLANATION,
    HARMLESS, MAJORITY_VOTE, PROOF,
};

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown prompt template '{0}'")]
    UnknownTemplate(String),
    #[error("missing binding '{0}'")]
    MissingBinding(String),
    #[error("failed to load prompt templates from {0}: {1}")]
    TemplateLoad(String, String),
    #[error("completion was empty")]
    EmptyCompletion,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("replay miss for prompt hash {0}")]
    ReplayMiss(String),
    #[error("backend timed out")]
    Timeout,
    #[error("transcript log: {0}")]
    TranscriptIo(String),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Generation parameters sent with every completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
    pub frequency_penalty: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            model_name: "deepseek-reasoner".to_string(),
            temperature: 0.7,
            max_tokens: 16000,
            top_p: 0.9,
            frequency_penalty: 0.2,
        }
    }
}

impl GenParams {
    /// Validate ranges: 0 ≤ temperature ≤ 2, 0 < top_p ≤ 1, max_tokens > 0.
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::BackendUnavailable(format!(
                "temperature {} out of [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::BackendUnavailable(format!(
                "top_p {} out of (0, 1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::BackendUnavailable("max_tokens must be > 0".into()));
        }
        Ok(())
    }
}

/// One recorded completion round-trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub request_id: u64,
    pub prompt_hash: String,
    pub prompt: String,
    pub completion: String,
    pub params: GenParams,
    pub timestamp: DateTime<Utc>,
    pub backend: BackendKind,
}

impl Transcript {
    #[doc(hidden)]
    pub fn for_test(prompt: &str, completion: &str) -> Self {
        Transcript {
            request_id: 0,
            prompt_hash: sha256_hex(prompt.as_bytes()),
            prompt: prompt.to_string(),
            completion: completion.to_string(),
            params: GenParams::default(),
            timestamp: Utc.timestamp_opt(0, 0).unwrap(),
            backend: BackendKind::Scripted,
        }
    }
}

/// Gateway shared across pipeline workers. Transcript writes are serialized;
/// replay lookup is read-only after load.
pub struct Gateway {
    backend: Box<dyn Backend>,
    prompts: PromptLibrary,
    log: Mutex<Vec<Transcript>>,
    log_file: Mutex<Option<PathBuf>>,
    next_id: AtomicU64,
    params: GenParams,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>, prompts: PromptLibrary, params: GenParams) -> Self {
        Gateway {
            backend,
            prompts,
            log: Mutex::new(Vec::new()),
            log_file: Mutex::new(None),
            next_id: AtomicU64::new(1),
            params,
        }
    }

    /// Append every transcript to `path` (JSON Lines) as it is recorded.
    pub fn with_log_file(self, path: PathBuf) -> Result<Self, GatewayError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| GatewayError::TranscriptIo(e.to_string()))?;
        }
        *self.log_file.lock().expect("log file lock") = Some(path);
        Ok(self)
    }

    pub fn params(&self) -> &GenParams {
        &self.params
    }

    pub fn prompts(&self) -> &PromptLibrary {
        &self.prompts
    }

    pub fn render_prompt(
        &self,
        template_id: &str,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String, GatewayError> {
        self.prompts.render(template_id, bindings)
    }

    /// Request a completion and record the transcript. Deterministic backends
    /// get a fixed timestamp so replayed runs produce identical logs.
    pub fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        self.complete_with(prompt, &self.params.clone())
    }

    pub fn complete_with(&self, prompt: &str, params: &GenParams) -> Result<String, GatewayError> {
        params.validate()?;
        let completion = self.backend.complete(prompt, params)?;
        let kind = self.backend.kind();
        let timestamp = match kind {
            BackendKind::Live => Utc::now(),
            BackendKind::Replay | BackendKind::Scripted => Utc.timestamp_opt(0, 0).unwrap(),
        };
        let transcript = Transcript {
            request_id: self.next_id.fetch_add(1, Ordering::SeqCst),
            prompt_hash: sha256_hex(prompt.as_bytes()),
            prompt: prompt.to_string(),
            completion: completion.clone(),
            params: params.clone(),
            timestamp,
            backend: kind,
        };
        self.record(transcript)?;
        Ok(completion)
    }

    fn record(&self, transcript: Transcript) -> Result<(), GatewayError> {
        if let Some(path) = self.log_file.lock().expect("log file lock").as_ref() {
            let line = serde_json::to_string(&transcript)
                .map_err(|e| GatewayError::TranscriptIo(e.to_string()))?;
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| GatewayError::TranscriptIo(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| GatewayError::TranscriptIo(e.to_string()))?;
        }
        self.log.lock().expect("transcript lock").push(transcript);
        Ok(())
    }

    pub fn transcript_count(&self) -> usize {
        self.log.lock().expect("transcript lock").len()
    }

    pub fn transcripts(&self) -> Vec<Transcript> {
        self.log.lock().expect("transcript lock").clone()
    }

    pub fn last_request_id(&self) -> u64 {
        self.next_id.load(Ordering::SeqCst) - 1
    }
}
