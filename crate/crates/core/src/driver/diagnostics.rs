//! Checker diagnostic parsing and normalization.
//!
//! The single supported wire format is the plain-text line grammar
//! `<file>:<line>:<col>: <severity>: <message...>`; lines that do not match
//! are continuations of the previous message.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

/// Normalized error taxonomy. Closed set of 13 kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    SyntaxError,
    TypeMismatch,
    FailedToSynthesize,
    InvalidField,
    UnknownIdentifier,
    UnexpectedToken,
    UnknownConstant,
    Unclassified,
    MissingDefinition,
    Timeout,
    NoGoals,
    ApplyFailed,
    IncompleteProof,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 13] = [
        ErrorKind::SyntaxError,
        ErrorKind::TypeMismatch,
        ErrorKind::FailedToSynthesize,
        ErrorKind::InvalidField,
        ErrorKind::UnknownIdentifier,
        ErrorKind::UnexpectedToken,
        ErrorKind::UnknownConstant,
        ErrorKind::Unclassified,
        ErrorKind::MissingDefinition,
        ErrorKind::Timeout,
        ErrorKind::NoGoals,
        ErrorKind::ApplyFailed,
        ErrorKind::IncompleteProof,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ErrorKind::SyntaxError => "syntax_error",
            ErrorKind::TypeMismatch => "type_mismatch",
            ErrorKind::FailedToSynthesize => "failed_to_synthesize",
            ErrorKind::InvalidField => "invalid_field",
            ErrorKind::UnknownIdentifier => "unknown_identifier",
            ErrorKind::UnexpectedToken => "unexpected_token",
            ErrorKind::UnknownConstant => "unknown_constant",
            ErrorKind::Unclassified => "unclassified",
            ErrorKind::MissingDefinition => "missing_definition",
            ErrorKind::Timeout => "timeout",
            ErrorKind::NoGoals => "no_goals",
            ErrorKind::ApplyFailed => "apply_failed",
            ErrorKind::IncompleteProof => "incomplete_proof",
        }
    }
}

/// Fixed, ordered keyword table. Order matters: `unexpected token` must win
/// over the generic syntax bucket, and the implicit-argument form of
/// synthesis failure is a type mismatch, not `failed to synthesize`.
const KEYWORD_TABLE: &[(&str, ErrorKind)] = &[
    ("unexpected token", ErrorKind::UnexpectedToken),
    (
        "don't know how to synthesize implicit argument",
        ErrorKind::TypeMismatch,
    ),
    ("failed to synthesize", ErrorKind::FailedToSynthesize),
    ("type mismatch", ErrorKind::TypeMismatch),
    ("invalid field", ErrorKind::InvalidField),
    ("unknown identifier", ErrorKind::UnknownIdentifier),
    ("unknown constant", ErrorKind::UnknownConstant),
    ("missing definition", ErrorKind::MissingDefinition),
    ("timeout", ErrorKind::Timeout),
    ("no goals", ErrorKind::NoGoals),
    ("'apply' failed", ErrorKind::ApplyFailed),
    ("unsolved goals", ErrorKind::IncompleteProof),
    ("declaration uses 'sorry'", ErrorKind::IncompleteProof),
    ("incomplete proof", ErrorKind::IncompleteProof),
    ("syntax error", ErrorKind::SyntaxError),
    ("unterminated", ErrorKind::SyntaxError),
    ("expected", ErrorKind::SyntaxError),
];

/// Classify a raw checker message. Total and deterministic; anything the
/// table does not match is `unclassified`.
pub fn normalize_error(message: &str) -> ErrorKind {
    let lower = message.to_lowercase();
    for (needle, kind) in KEYWORD_TABLE {
        if lower.contains(needle) {
            return *kind;
        }
    }
    ErrorKind::Unclassified
}

/// One checker message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: String,
    /// 1-based line.
    pub line: usize,
    /// 0-based column.
    pub col: usize,
    pub severity: Severity,
    pub message: String,
    pub kind: ErrorKind,
    /// Owning declaration, filled in by attribution.
    pub decl: Option<String>,
}

static DIAG_LINE_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^(?P<file>[^:\n]+):(?P<line>\d+):(?P<col>\d+):\s*(?P<sev>error|warning):\s?(?P<msg>.*)$")
        .expect("diagnostic line regex")
});

#[derive(Debug, Clone, Default)]
pub struct ParsedDiagnostics {
    pub diagnostics: Vec<Diagnostic>,
    /// Leading lines that matched nothing and had no message to attach to.
    pub ignored_lines: usize,
}

/// Parse a raw diagnostic stream. Non-matching lines are appended to the
/// preceding message; order is preserved.
pub fn parse_diagnostics_report(raw: &str) -> ParsedDiagnostics {
    let mut out = ParsedDiagnostics::default();
    for line in raw.lines() {
        if let Some(caps) = DIAG_LINE_RE.captures(line) {
            let severity = match &caps["sev"] {
                "error" => Severity::Error,
                _ => Severity::Warning,
            };
            let message = caps["msg"].to_string();
            out.diagnostics.push(Diagnostic {
                file: caps["file"].to_string(),
                line: caps["line"].parse().unwrap_or(1).max(1),
                col: caps["col"].parse().unwrap_or(0),
                severity,
                kind: normalize_error(&message),
                message,
                decl: None,
            });
        } else if let Some(last) = out.diagnostics.last_mut() {
            last.message.push('\n');
            last.message.push_str(line);
            last.kind = normalize_error(&last.message);
        } else if !line.trim().is_empty() {
            out.ignored_lines += 1;
        }
    }
    out
}

pub fn parse_diagnostics(raw: &str) -> Vec<Diagnostic> {
    parse_diagnostics_report(raw).diagnostics
}
