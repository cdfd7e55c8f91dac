//! Prompt templates with named `{placeholder}` slots.
//!
//! Templates are plain text assets. The builtin set is compiled in from
//! `assets/prompts/`; a directory of overrides can be loaded at startup so
//! prompts stay editable without a rebuild.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;

use super::GatewayError;

static PLACEHOLDER_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").expect("placeholder regex"));

/// A named prompt template. Placeholders are `{lower_snake_case}` tokens
/// scanned out of the body at load time.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
    pub placeholders: Vec<String>,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let mut placeholders: Vec<String> = Vec::new();
        for cap in PLACEHOLDER_RE.captures_iter(&body) {
            let name = cap[1].to_string();
            if !placeholders.contains(&name) {
                placeholders.push(name);
            }
        }
        PromptTemplate {
            id: id.into(),
            body,
            placeholders,
        }
    }

    /// Substitute every placeholder verbatim. All placeholders must be bound;
    /// substitution is a single pass, so binding values are never re-expanded.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        for name in &self.placeholders {
            if !bindings.contains_key(name) {
                return Err(GatewayError::MissingBinding(name.clone()));
            }
        }
        let mut out = String::with_capacity(self.body.len());
        let mut last = 0;
        for cap in PLACEHOLDER_RE.captures_iter(&self.body) {
            let m = cap.get(0).unwrap();
            out.push_str(&self.body[last..m.start()]);
            out.push_str(&bindings[&cap[1]]);
            last = m.end();
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

/// The set of prompt templates the pipeline knows about.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: HashMap<String, PromptTemplate>,
}

pub const BACKBONE: &str = "backbone";
pub const PROOF: &str = "proof";
pub const CORRECTION: &str = "correction";
pub const FIX_EXPLANATION: &str = "fix_explanation";
pub const MAJORITY_VOTE: &str = "majority_vote";
pub const HARMLESS: &str = "harmless";
pub const BACKTRANSLATE: &str = "backtranslate";

impl PromptLibrary {
    /// Library containing the compiled-in prompt assets.
    pub fn builtin() -> Self {
        let mut templates = HashMap::new();
        let assets: &[(&str, &str)] = &[
            (BACKBONE, include_str!("../../../../assets/prompts/backbone.txt")),
            (PROOF, include_str!("../../../../assets/prompts/proof.txt")),
            (CORRECTION, include_str!("../../../../assets/prompts/correction.txt")),
            (
                FIX_EXPLANATION,
                include_str!("../../../../assets/prompts/fix_explanation.txt"),
            ),
            (
                MAJORITY_VOTE,
                include_str!("../../../../assets/prompts/majority_vote.txt"),
            ),
            (HARMLESS, include_str!("../../../../assets/prompts/harmless.txt")),
            (
                BACKTRANSLATE,
                include_str!("../../../../assets/prompts/backtranslate.txt"),
            ),
        ];
        for (id, body) in assets {
            templates.insert((*id).to_string(), PromptTemplate::new(*id, *body));
        }
        PromptLibrary { templates }
    }

    /// Builtin library with any `<id>.txt` files in `dir` replacing or adding
    /// templates.
    pub fn with_overrides(dir: &Path) -> Result<Self, GatewayError> {
        let mut lib = Self::builtin();
        if !dir.is_dir() {
            return Ok(lib);
        }
        let entries = fs::read_dir(dir)
            .map_err(|e| GatewayError::TemplateLoad(dir.display().to_string(), e.to_string()))?;
        for entry in entries {
            let entry =
                entry.map_err(|e| GatewayError::TemplateLoad(dir.display().to_string(), e.to_string()))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let body = fs::read_to_string(&path)
                .map_err(|e| GatewayError::TemplateLoad(path.display().to_string(), e.to_string()))?;
            lib.templates.insert(id.clone(), PromptTemplate::new(id, body));
        }
        Ok(lib)
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, GatewayError> {
        self.templates
            .get(id)
            .ok_or_else(|| GatewayError::UnknownTemplate(id.to_string()))
    }

    pub fn render(
        &self,
        id: &str,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String, GatewayError> {
        self.get(id)?.render(bindings)
    }
}

/// Convenience for building binding maps.
pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
