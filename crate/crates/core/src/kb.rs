//! Self-updating knowledge base of error→fix exemplars with top-k retrieval.
//!
//! Retrieval ranks same-kind entries first, then masked-token Jaccard
//! similarity, then newer id. The reported score is
//! `(kind_match + similarity) / 2`, which stays in [0, 1] and is
//! non-increasing down the result list.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{normalize_error, ErrorKind};
use crate::gateway::{bindings, Gateway, GatewayError, FIX_EXPLANATION};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("kb io: {0}")]
    Io(String),
    #[error("record_fix requires fixed ≠ faulty")]
    IdenticalSnippets,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Four-part fix explanation, as mandated by the explanation prompt format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub error_type: String,
    pub root_cause: String,
    pub fix_description: String,
    pub why_it_works: String,
}

impl Explanation {
    pub fn is_complete(&self) -> bool {
        ![
            &self.error_type,
            &self.root_cause,
            &self.fix_description,
            &self.why_it_works,
        ]
        .iter()
        .any(|s| s.trim().is_empty())
    }
}

/// One stored error→fix exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KBEntry {
    pub id: u64,
    pub kind: ErrorKind,
    pub message: String,
    pub faulty_snippet: String,
    pub fixed_snippet: String,
    pub explanation: Explanation,
    pub created_at: DateTime<Utc>,
    pub use_count: u64,
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub entries: Vec<(KBEntry, f64)>,
}

/// Tokenize, lowercase, and mask: all-digit tokens become `<n>`,
/// single-letter tokens become `<v>`.
fn masked_tokens(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for raw in text.split(|c: char| !c.is_alphanumeric()) {
        if raw.is_empty() {
            continue;
        }
        let token = raw.to_lowercase();
        let masked = if token.chars().all(|c| c.is_ascii_digit()) {
            "<n>".to_string()
        } else if token.chars().count() == 1 {
            "<v>".to_string()
        } else {
            token
        };
        out.insert(masked);
    }
    out
}

/// Jaccard index over masked token sets. Symmetric; 1.0 iff the masked sets
/// are equal (two empty sets count as equal).
pub fn similarity(a: &str, b: &str) -> f64 {
    let ta = masked_tokens(a);
    let tb = masked_tokens(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let inter = ta.intersection(&tb).count();
    let union = ta.union(&tb).count();
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptLine {
    pub line_no: usize,
    pub reason: String,
}

#[derive(Default)]
pub struct KnowledgeBase {
    entries: Vec<KBEntry>,
    /// When set, every new entry is appended here as it is recorded.
    path: Option<PathBuf>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Attach a JSON Lines store; existing entries are loaded, new ones are
    /// appended on record.
    pub fn open(path: &Path) -> Result<(Self, Vec<CorruptLine>), KbError> {
        let (mut kb, corrupt) = if path.exists() {
            Self::load(path)?
        } else {
            (Self::new(), Vec::new())
        };
        kb.path = Some(path.to_path_buf());
        Ok((kb, corrupt))
    }

    /// Load a JSON Lines store. Corrupt lines are skipped and reported,
    /// never fatal.
    pub fn load(path: &Path) -> Result<(Self, Vec<CorruptLine>), KbError> {
        let text = fs::read_to_string(path).map_err(|e| KbError::Io(format!("{}: {e}", path.display())))?;
        let mut kb = Self::new();
        let mut corrupt = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<KBEntry>(line) {
                Ok(entry) => {
                    if entry.kind != normalize_error(&entry.message) {
                        corrupt.push(CorruptLine {
                            line_no: i + 1,
                            reason: format!(
                                "kind {} does not match normalize_error({})",
                                entry.kind.label(),
                                normalize_error(&entry.message).label()
                            ),
                        });
                    } else if !entry.explanation.is_complete() {
                        corrupt.push(CorruptLine {
                            line_no: i + 1,
                            reason: "explanation has an empty part".to_string(),
                        });
                    } else {
                        kb.entries.push(entry);
                    }
                }
                Err(e) => corrupt.push(CorruptLine {
                    line_no: i + 1,
                    reason: e.to_string(),
                }),
            }
        }
        Ok((kb, corrupt))
    }

    /// Write the whole store to `path`.
    pub fn persist(&self, path: &Path) -> Result<(), KbError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| KbError::Io(e.to_string()))?;
        }
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).map_err(|e| KbError::Io(e.to_string()))?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| KbError::Io(format!("{}: {e}", path.display())))
    }

    pub fn entries(&self) -> &[KBEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&KBEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    fn next_id(&self) -> u64 {
        self.entries.iter().map(|e| e.id).max().unwrap_or(0) + 1
    }

    /// Histogram of entry kinds over the 13-kind taxonomy.
    pub fn kind_histogram(&self) -> Vec<(ErrorKind, usize)> {
        ErrorKind::ALL
            .iter()
            .map(|k| (*k, self.entries.iter().filter(|e| e.kind == *k).count()))
            .collect()
    }

    /// Top-k entries for an error message: same kind first, then similarity,
    /// then newer id. Increments use_count of the returned entries.
    pub fn retrieve(&mut self, message: &str, k: usize) -> RetrievalResult {
        let kind = normalize_error(message);
        let mut ranked: Vec<(usize, bool, f64, u64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.kind == kind, similarity(message, &e.message), e.id))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal))
                .then(b.3.cmp(&a.3))
        });
        ranked.truncate(k);
        let mut entries = Vec::with_capacity(ranked.len());
        for (i, same_kind, sim, _) in ranked {
            self.entries[i].use_count += 1;
            let score = (if same_kind { 1.0 } else { 0.0 } + sim) / 2.0;
            entries.push((self.entries[i].clone(), score));
        }
        RetrievalResult { entries }
    }

    /// Append a pre-built entry (seeding, tests). The id is reassigned to
    /// keep ids monotone.
    pub fn insert(&mut self, mut entry: KBEntry) -> Result<u64, KbError> {
        entry.id = self.next_id();
        self.append(entry.clone())?;
        Ok(entry.id)
    }

    fn append(&mut self, entry: KBEntry) -> Result<(), KbError> {
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&entry).map_err(|e| KbError::Io(e.to_string()))?;
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| KbError::Io(e.to_string()))?;
            }
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| KbError::Io(format!("{}: {e}", path.display())))?;
            writeln!(file, "{line}").map_err(|e| KbError::Io(e.to_string()))?;
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Log a resolved error: render the fix-explanation prompt, parse the
    /// four labeled sections, store the entry. An unparseable explanation is
    /// degraded (raw completion under fix_description), never dropped.
    pub fn record_fix(
        &mut self,
        gateway: &Gateway,
        message: &str,
        faulty: &str,
        fixed: &str,
    ) -> Result<KBEntry, KbError> {
        if faulty == fixed {
            return Err(KbError::IdenticalSnippets);
        }
        let prompt = gateway.render_prompt(
            FIX_EXPLANATION,
            &bindings([("original_code", faulty), ("fixed_code", fixed)]),
        )?;
        let completion = gateway.complete(&prompt)?;
        let explanation = parse_explanation(&completion).unwrap_or_else(|| Explanation {
            error_type: "unparsed".to_string(),
            root_cause: "unparsed".to_string(),
            fix_description: completion.clone(),
            why_it_works: "unparsed".to_string(),
        });
        let entry = KBEntry {
            id: self.next_id(),
            kind: normalize_error(message),
            message: message.to_string(),
            faulty_snippet: faulty.to_string(),
            fixed_snippet: fixed.to_string(),
            explanation,
            created_at: match gateway.transcripts().last().map(|t| t.backend) {
                Some(crate::gateway::BackendKind::Live) => Utc::now(),
                _ => Utc.timestamp_opt(0, 0).unwrap(),
            },
            use_count: 0,
        };
        self.append(entry.clone())?;
        Ok(entry)
    }

    /// Seed from a directory of `.json` (single entry) and `.jsonl` (many)
    /// files. Returns how many entries were added and any corrupt lines.
    pub fn seed_from_dir(&mut self, dir: &Path) -> Result<(usize, Vec<CorruptLine>), KbError> {
        let mut added = 0;
        let mut corrupt = Vec::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| KbError::Io(format!("{}: {e}", dir.display())))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("json") | Some("jsonl")
                )
            })
            .collect();
        paths.sort();
        for path in paths {
            let text =
                fs::read_to_string(&path).map_err(|e| KbError::Io(format!("{}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<SeedEntry>(line) {
                    Ok(seed) => {
                        let entry = seed.into_entry(self.next_id());
                        self.append(entry)?;
                        added += 1;
                    }
                    Err(e) => corrupt.push(CorruptLine {
                        line_no: i + 1,
                        reason: format!("{}: {e}", path.display()),
                    }),
                }
            }
        }
        Ok((added, corrupt))
    }
}

/// Seed file schema: a KBEntry without id/kind/use_count bookkeeping.
#[derive(Debug, Deserialize)]
struct SeedEntry {
    message: String,
    faulty_snippet: String,
    fixed_snippet: String,
    explanation: Explanation,
    #[serde(default)]
    created_at: Option<DateTime<Utc>>,
}

impl SeedEntry {
    fn into_entry(self, id: u64) -> KBEntry {
        KBEntry {
            id,
            kind: normalize_error(&self.message),
            message: self.message,
            faulty_snippet: self.faulty_snippet,
            fixed_snippet: self.fixed_snippet,
            explanation: self.explanation,
            created_at: self
                .created_at
                .unwrap_or_else(|| Utc.timestamp_opt(0, 0).unwrap()),
            use_count: 0,
        }
    }
}

/// Parse the `Error Type: / Root Cause: / Fix Description: / Why It Works:`
/// labeled sections. Returns None when any label is missing.
pub fn parse_explanation(completion: &str) -> Option<Explanation> {
    const LABELS: [&str; 4] = ["Error Type:", "Root Cause:", "Fix Description:", "Why It Works:"];
    let mut positions = Vec::with_capacity(4);
    for label in LABELS {
        positions.push((completion.find(label)?, label));
    }
    // labels must appear in order
    if positions.windows(2).any(|w| w[0].0 >= w[1].0) {
        return None;
    }
    let mut parts = Vec::with_capacity(4);
    for (i, (start, label)) in positions.iter().enumerate() {
        let begin = start + label.len();
        let end = positions.get(i + 1).map(|(p, _)| *p).unwrap_or(completion.len());
        let text = completion[begin..end].trim().to_string();
        if text.is_empty() {
            return None;
        }
        parts.push(text);
    }
    Some(Explanation {
        error_type: parts[0].clone(),
        root_cause: parts[1].clone(),
        fix_description: parts[2].clone(),
        why_it_works: parts[3].clone(),
    })
}
