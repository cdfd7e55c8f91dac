//! Feedback-driven correction loop and proof refinement.
//!
//! Each iteration: run the static rules, check, stop if clean, otherwise
//! build a correction prompt (errors + context + knowledge-base retrievals),
//! take one candidate, recheck. On resolution the fix is logged back into the
//! knowledge base. After the step budget the best candidate seen wins, where
//! best means lexicographically minimal (error count, sorry count) —
//! including the original input, so repair never makes a file worse.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{scan_sorries, CheckError, CheckReport, ErrorKind, SourceChecker};
use crate::fixer::apply_rules;
use crate::gateway::{bindings, extract_code_block, Gateway, GatewayError, CORRECTION, PROOF};
use crate::kb::KnowledgeBase;
use crate::templates::Template;

#[derive(Debug, Error)]
pub enum RepairError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Check(#[from] CheckError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub errors_before: usize,
    pub errors_after: usize,
    pub rule_ids: Vec<String>,
    pub kb_hits: Vec<u64>,
    pub transcript: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub final_source: String,
    pub iterations_used: u32,
    pub resolved: bool,
    pub per_iteration: Vec<IterationRecord>,
    pub best_candidate: String,
    /// The rules-applied input checked on the first iteration.
    pub prepared_input: String,
    /// fix_once outputs in order, for the per-iteration candidate files.
    pub candidates: Vec<String>,
}

pub struct Repairer<'a> {
    pub gateway: &'a Gateway,
    pub checker: &'a dyn SourceChecker,
    pub template: Option<&'a Template>,
    pub max_correction_steps: u32,
    pub retrieval_k: usize,
}

const CONTEXT_RADIUS: usize = 8;

/// Pipeline sources always carry a trailing newline so checker digests are
/// stable across extraction and file round-trips.
fn with_trailing_newline(mut s: String) -> String {
    if !s.is_empty() && !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn local_context(src: &str, line: usize, radius: usize) -> String {
    let lines: Vec<&str> = src.lines().collect();
    if lines.is_empty() {
        return String::new();
    }
    let lo = line.saturating_sub(radius + 1);
    let hi = (line + radius).min(lines.len());
    lines[lo..hi].join("\n")
}

impl<'a> Repairer<'a> {
    fn error_sections(&self, src: &str, report: &CheckReport) -> String {
        let lines: Vec<&str> = src.lines().collect();
        let mut out = String::new();
        for (i, diag) in report.errors().enumerate() {
            let block = report
                .decls
                .iter()
                .find(|s| s.contains_line(diag.line) && diag.decl.as_deref() == Some(s.name.as_str()))
                .map(|s| s.text(&lines))
                .unwrap_or_default();
            out.push_str(&format!(
                "[Error {}]\n\nFile: {}\n\nLine: {}\n\nError: {}\n\n[Context] {}\n\n[Full Block Context] {}\n\n",
                i + 1,
                diag.file,
                diag.line,
                diag.message,
                local_context(src, diag.line, CONTEXT_RADIUS),
                block,
            ));
        }
        out.trim_end().to_string()
    }

    /// One retrieval block per distinct error kind, keyed by the first error
    /// of that kind.
    fn kb_sections(&self, report: &CheckReport, kb: &Mutex<KnowledgeBase>) -> (String, Vec<u64>) {
        let mut seen_kinds: Vec<ErrorKind> = Vec::new();
        let mut out = String::new();
        let mut hits = Vec::new();
        let mut kb = kb.lock().expect("kb lock");
        for diag in report.errors() {
            if seen_kinds.contains(&diag.kind) {
                continue;
            }
            seen_kinds.push(diag.kind);
            let result = kb.retrieve(&diag.message, self.retrieval_k);
            if result.entries.is_empty() {
                continue;
            }
            out.push_str(&format!("[Top 3 Similar Error Solutions] ({})\n\n", diag.kind.label()));
            for (entry, _score) in &result.entries {
                hits.push(entry.id);
                out.push_str(&format!(
                    "Past Error: {}\nFaulty Code: {}\nFixed Code: {}\nError Type: {}\nRoot Cause: {}\nFix Description: {}\nWhy It Works: {}\n\n",
                    entry.message,
                    entry.faulty_snippet,
                    entry.fixed_snippet,
                    entry.explanation.error_type,
                    entry.explanation.root_cause,
                    entry.explanation.fix_description,
                    entry.explanation.why_it_works,
                ));
            }
        }
        (out.trim_end().to_string(), hits)
    }

    /// Statement text of template theorems the errors name; for a failed
    /// apply with no named theorem, every theorem-role statement.
    fn theorem_details(&self, report: &CheckReport) -> String {
        let Some(template) = self.template else {
            return String::new();
        };
        let theorem_names = template.theorem_names();
        let mut named: Vec<&str> = Vec::new();
        let mut saw_apply_failed = false;
        for diag in report.errors() {
            if diag.kind == ErrorKind::ApplyFailed {
                saw_apply_failed = true;
            }
            for name in &theorem_names {
                if !named.contains(name) && diag.message.contains(name) {
                    named.push(name);
                }
            }
        }
        if named.is_empty() && saw_apply_failed {
            named = template.t_role_names();
        }
        if named.is_empty() {
            return String::new();
        }
        let mut out = String::from("[Theorem Details]\n\n");
        for name in named {
            if let Some(text) = template.decl_text(name) {
                out.push_str(&text);
                out.push_str("\n\n");
            }
        }
        out.trim_end().to_string()
    }

    /// One correction round: build the prompt, take one candidate.
    pub fn fix_once(
        &self,
        src: &str,
        report: &CheckReport,
        kb: &Mutex<KnowledgeBase>,
    ) -> Result<(String, Vec<u64>, u64), RepairError> {
        let error_sections = self.error_sections(src, report);
        let (kb_sections, kb_hits) = self.kb_sections(report, kb);
        let theorem_details = self.theorem_details(report);
        let prompt = self.gateway.render_prompt(
            CORRECTION,
            &bindings([
                ("current_code", src),
                ("error_sections", error_sections.as_str()),
                ("kb_sections", kb_sections.as_str()),
                ("theorem_details", theorem_details.as_str()),
            ]),
        )?;
        let completion = self.gateway.complete(&prompt)?;
        let transcript = self.gateway.last_request_id();
        let candidate = match extract_code_block(&completion) {
            Ok(code) => with_trailing_newline(code),
            // an empty completion fixes nothing; echo the input so the loop
            // counts no progress
            Err(GatewayError::EmptyCompletion) => src.to_string(),
            Err(e) => return Err(e.into()),
        };
        Ok((candidate, kb_hits, transcript))
    }

    /// Run the correction loop on `src`.
    pub fn repair(&self, src: &str, kb: &Mutex<KnowledgeBase>) -> Result<RepairOutcome, RepairError> {
        // candidates seen, in preference order on ties: earliest first
        let mut tracked: Vec<(String, usize, usize)> = Vec::new();
        let track = |text: &str, errors: usize, tracked: &mut Vec<(String, usize, usize)>| {
            tracked.push((text.to_string(), errors, scan_sorries(text).len()));
        };

        let mut per_iteration = Vec::new();
        let mut candidates = Vec::new();
        let mut prepared_input = String::new();
        let mut cur = src.to_string();

        for step in 0..self.max_correction_steps {
            let (fixed, rule_ids) = apply_rules(&cur);
            if step == 0 {
                prepared_input = fixed.clone();
            }
            let report = self.checker.check_source(&fixed)?;
            track(&fixed, report.error_count, &mut tracked);
            if report.error_count == 0 {
                return Ok(RepairOutcome {
                    best_candidate: fixed.clone(),
                    final_source: fixed,
                    iterations_used: step,
                    resolved: true,
                    per_iteration,
                    prepared_input,
                    candidates,
                });
            }
            let (candidate, kb_hits, transcript) = self.fix_once(&fixed, &report, kb)?;
            let recheck = self.checker.check_source(&candidate)?;
            track(&candidate, recheck.error_count, &mut tracked);
            candidates.push(candidate.clone());
            per_iteration.push(IterationRecord {
                errors_before: report.error_count,
                errors_after: recheck.error_count,
                rule_ids: rule_ids.iter().map(|s| s.to_string()).collect(),
                kb_hits,
                transcript,
            });
            if recheck.error_count == 0 {
                // log the resolved fix; losing the log never fails the repair
                if let Some(first) = report.errors().next() {
                    let mut kb = kb.lock().expect("kb lock");
                    let _ = kb.record_fix(self.gateway, &first.message, &fixed, &candidate);
                }
                return Ok(RepairOutcome {
                    best_candidate: candidate.clone(),
                    final_source: candidate,
                    iterations_used: step + 1,
                    resolved: true,
                    per_iteration,
                    prepared_input,
                    candidates,
                });
            }
            cur = candidate;
        }

        // exhausted: pick the best candidate seen, input included
        if !tracked.iter().any(|(text, _, _)| text == src) {
            let report = self.checker.check_source(src)?;
            tracked.insert(0, (src.to_string(), report.error_count, scan_sorries(src).len()));
        } else {
            // ensure the input ranks first among equals
            let pos = tracked.iter().position(|(t, _, _)| t == src).unwrap();
            let input = tracked.remove(pos);
            tracked.insert(0, input);
        }
        let best = tracked
            .iter()
            .min_by_key(|(_, errors, sorries)| (*errors, *sorries))
            .expect("at least the input is tracked")
            .clone();
        Ok(RepairOutcome {
            final_source: best.0.clone(),
            iterations_used: self.max_correction_steps,
            resolved: best.1 == 0,
            per_iteration,
            best_candidate: best.0,
            prepared_input,
            candidates,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub source: String,
    pub unresolved_sorries: usize,
    pub attempts: u32,
    /// Post-repair candidate per attempt, for the candidate files.
    pub attempt_candidates: Vec<String>,
    /// Inner repair iteration records, pooled across attempts.
    pub repair_iterations: Vec<IterationRecord>,
    /// Transcript ids of the proof-generation completions.
    pub proof_transcripts: Vec<u64>,
    /// Wall-clock split between proof generation and proof correction.
    pub gen_seconds: f64,
    pub correction_seconds: f64,
}

/// Eliminate sorry placeholders by whole-file proof generation. A candidate
/// is accepted only if it compiles clean and strictly lowers the sorry
/// count; otherwise the best compiling version is kept, sorries retained.
pub fn refine_proofs(
    repairer: &Repairer,
    src: &str,
    kb: &Mutex<KnowledgeBase>,
    max_proof_attempts: u32,
) -> Result<RefineOutcome, RepairError> {
    let mut best = src.to_string();
    let mut best_sorries = scan_sorries(&best).len();
    let mut outcome = RefineOutcome {
        source: best.clone(),
        unresolved_sorries: best_sorries,
        attempts: 0,
        attempt_candidates: Vec::new(),
        repair_iterations: Vec::new(),
        proof_transcripts: Vec::new(),
        gen_seconds: 0.0,
        correction_seconds: 0.0,
    };
    if best_sorries == 0 {
        return Ok(outcome);
    }
    let example_content = repairer.template.map(|t| t.lean_source.as_str()).unwrap_or("");

    for attempt in 1..=max_proof_attempts {
        outcome.attempts = attempt;
        let sorry_lines = scan_sorries(&best);
        let mut contexts = String::from("Local context of each remaining \"sorry\":\n");
        for (i, line) in sorry_lines.iter().enumerate() {
            contexts.push_str(&format!(
                "\n[Sorry {}] line {}:\n{}\n",
                i + 1,
                line,
                local_context(&best, *line, CONTEXT_RADIUS)
            ));
        }
        let prompt = repairer.gateway.render_prompt(
            PROOF,
            &bindings([
                ("lean_content", best.as_str()),
                ("sorry_contexts", contexts.as_str()),
                ("example_content", example_content),
            ]),
        )?;
        let gen_start = std::time::Instant::now();
        let completion = repairer.gateway.complete(&prompt)?;
        outcome.gen_seconds += gen_start.elapsed().as_secs_f64();
        outcome.proof_transcripts.push(repairer.gateway.last_request_id());
        let candidate = match extract_code_block(&completion) {
            Ok(code) => with_trailing_newline(code),
            Err(GatewayError::EmptyCompletion) => continue,
            Err(e) => return Err(e.into()),
        };
        // proof errors go through the same correction loop
        let corr_start = std::time::Instant::now();
        let repaired = repairer.repair(&candidate, kb)?;
        outcome.correction_seconds += corr_start.elapsed().as_secs_f64();
        outcome.repair_iterations.extend(repaired.per_iteration.clone());
        outcome.attempt_candidates.push(repaired.final_source.clone());
        if repaired.resolved {
            let sorries = scan_sorries(&repaired.final_source).len();
            if sorries < best_sorries {
                best = repaired.final_source;
                best_sorries = sorries;
            }
        }
        if best_sorries == 0 {
            break;
        }
    }
    outcome.source = best;
    outcome.unresolved_sorries = best_sorries;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::MockChecker;
    use crate::gateway::{FnBackend, GenParams, PromptLibrary};
    use std::fs;
    use tempfile::TempDir;

    fn gateway_with(f: impl Fn(&str) -> Result<String, GatewayError> + Send + Sync + 'static) -> Gateway {
        Gateway::new(Box::new(FnBackend(f)), PromptLibrary::builtin(), GenParams::default())
    }

    fn stage_error(dir: &TempDir, src: &str, raw: &str) {
        fs::write(MockChecker::fixture_path_for(dir.path(), src), raw).unwrap();
    }

    #[test]
    fn clean_input_makes_no_gateway_calls() {
        let dir = TempDir::new().unwrap();
        let checker = MockChecker::new(dir.path());
        let gw = gateway_with(|_| panic!("must not be called"));
        let repairer = Repairer {
            gateway: &gw,
            checker: &checker,
            template: None,
            max_correction_steps: 3,
            retrieval_k: 3,
        };
        let kb = Mutex::new(KnowledgeBase::new());
        let out = repairer.repair("def a := 1\n", &kb).unwrap();
        assert!(out.resolved);
        assert_eq!(out.iterations_used, 0);
        assert_eq!(gw.transcript_count(), 0);
    }

    #[test]
    fn one_shot_fix_resolves_and_records() {
        let dir = TempDir::new().unwrap();
        let broken = "def a := nonsense\n";
        let fixed = "def a := 1\n";
        stage_error(&dir, broken, "T.lean:1:9: error: unknown identifier 'nonsense'\n");
        let checker = MockChecker::new(dir.path());
        let fixed_clone = fixed.to_string();
        let gw = gateway_with(move |prompt| {
            if prompt.contains("analyze these code changes") {
                Ok("Error Type: a\nRoot Cause: b\nFix Description: c\nWhy It Works: d".into())
            } else {
                Ok(format!("```lean\n{}```", fixed_clone))
            }
        });
        let repairer = Repairer {
            gateway: &gw,
            checker: &checker,
            template: None,
            max_correction_steps: 3,
            retrieval_k: 3,
        };
        let kb = Mutex::new(KnowledgeBase::new());
        let out = repairer.repair(broken, &kb).unwrap();
        assert!(out.resolved);
        assert_eq!(out.iterations_used, 1);
        assert_eq!(out.final_source.trim_end(), fixed.trim_end());
        assert_eq!(kb.lock().unwrap().len(), 1, "resolved fix recorded");
        // correction call + explanation call
        assert_eq!(gw.transcript_count(), 2);
    }

    #[test]
    fn worsening_backend_falls_back_to_input() {
        // input has 3 errors; every candidate has 5; best candidate = input
        let dir = TempDir::new().unwrap();
        let input = "def a := x\ndef b := y\ndef c := z\n";
        let worse = "def a := bad\n";
        stage_error(
            &dir,
            input,
            "T.lean:1:9: error: unknown identifier 'x'\nT.lean:2:9: error: unknown identifier 'y'\nT.lean:3:9: error: unknown identifier 'z'\n",
        );
        stage_error(
            &dir,
            worse,
            "T.lean:1:0: error: expected term\nT.lean:1:1: error: expected term\nT.lean:1:2: error: expected term\nT.lean:1:3: error: expected term\nT.lean:1:4: error: expected term\n",
        );
        let checker = MockChecker::new(dir.path());
        let worse_clone = worse.to_string();
        let gw = gateway_with(move |_| Ok(format!("```lean\n{}```", worse_clone)));
        let repairer = Repairer {
            gateway: &gw,
            checker: &checker,
            template: None,
            max_correction_steps: 3,
            retrieval_k: 3,
        };
        let kb = Mutex::new(KnowledgeBase::new());
        let out = repairer.repair(input, &kb).unwrap();
        assert!(!out.resolved);
        assert_eq!(out.iterations_used, 3);
        assert_eq!(out.final_source, input);
        assert_eq!(out.best_candidate, input);
    }

    #[test]
    fn echo_backend_counts_no_progress() {
        let dir = TempDir::new().unwrap();
        let input = "def a := x\n";
        stage_error(&dir, input, "T.lean:1:9: error: unknown identifier 'x'\n");
        let checker = MockChecker::new(dir.path());
        let input_clone = input.to_string();
        let gw = gateway_with(move |_| Ok(format!("```lean\n{}```", input_clone)));
        let repairer = Repairer {
            gateway: &gw,
            checker: &checker,
            template: None,
            max_correction_steps: 3,
            retrieval_k: 3,
        };
        let kb = Mutex::new(KnowledgeBase::new());
        let out = repairer.repair(input, &kb).unwrap();
        assert!(!out.resolved);
        for it in &out.per_iteration {
            assert_eq!(it.errors_before, it.errors_after);
        }
    }

    #[test]
    fn correction_prompt_carries_kb_and_dedups_kinds() {
        use crate::kb::{Explanation, KBEntry};
        use chrono::{TimeZone, Utc};
        let dir = TempDir::new().unwrap();
        let input = "def a := x\ndef b := y\n";
        // two errors of the same kind
        stage_error(
            &dir,
            input,
            "T.lean:1:9: error: unknown identifier 'x'\nT.lean:2:9: error: unknown identifier 'y'\n",
        );
        let checker = MockChecker::new(dir.path());
        let gw = gateway_with(|_| Ok("```lean\ndef a := 1\ndef b := 2\n```".into()));
        let repairer = Repairer {
            gateway: &gw,
            checker: &checker,
            template: None,
            max_correction_steps: 1,
            retrieval_k: 3,
        };
        let kb = Mutex::new(KnowledgeBase::new());
        for i in 0..5 {
            kb.lock()
                .unwrap()
                .insert(KBEntry {
                    id: i,
                    kind: crate::driver::normalize_error("unknown identifier 'q'"),
                    message: format!("unknown identifier 'q{i}'"),
                    faulty_snippet: "f".into(),
                    fixed_snippet: "g".into(),
                    explanation: Explanation {
                        error_type: "t".into(),
                        root_cause: "r".into(),
                        fix_description: "d".into(),
                        why_it_works: "w".into(),
                    },
                    created_at: Utc.timestamp_opt(0, 0).unwrap(),
                    use_count: 0,
                })
                .unwrap();
        }
        let _ = repairer.repair(input, &kb).unwrap();
        let prompt = &gw.transcripts()[0].prompt;
        // exactly one retrieval block for the one distinct kind, 3 entries
        assert_eq!(prompt.matches("[Top 3 Similar Error Solutions]").count(), 1);
        assert_eq!(prompt.matches("Past Error:").count(), 3);
        assert_eq!(prompt.matches("[Error 1]").count(), 1);
        assert_eq!(prompt.matches("[Error 2]").count(), 1);
    }

    #[test]
    fn theorem_details_added_for_named_template_theorem() {
        let assets = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/templates");
        let template = crate::templates::load_template(&assets, "PGM").unwrap();
        let dir = TempDir::new().unwrap();
        let input = "theorem t : True := by\n  apply pg_converge\n";
        stage_error(
            &dir,
            input,
            "T.lean:2:2: error: tactic 'apply' failed, failed to unify pg_converge with goal\n",
        );
        let checker = MockChecker::new(dir.path());
        let gw = gateway_with(|_| Ok("```lean\ntheorem t : True := by trivial\n```".into()));
        let repairer = Repairer {
            gateway: &gw,
            checker: &checker,
            template: Some(&template),
            max_correction_steps: 1,
            retrieval_k: 3,
        };
        let kb = Mutex::new(KnowledgeBase::new());
        let _ = repairer.repair(input, &kb).unwrap();
        let prompt = &gw.transcripts()[0].prompt;
        assert!(prompt.contains("[Theorem Details]"));
        assert!(prompt.contains("theorem pg_converge"));
    }

    #[test]
    fn refine_replaces_sorries_when_candidate_compiles() {
        let dir = TempDir::new().unwrap();
        let input = "theorem t : True := by sorry\ntheorem u : True := by sorry\n";
        let proved = "theorem t : True := by trivial\ntheorem u : True := by trivial\n";
        let checker = MockChecker::new(dir.path()); // everything compiles
        let proved_clone = proved.to_string();
        let gw = gateway_with(move |prompt| {
            assert!(prompt.contains("REPLACE ALL"));
            Ok(format!("```lean4\n{}```", proved_clone))
        });
        let repairer = Repairer {
            gateway: &gw,
            checker: &checker,
            template: None,
            max_correction_steps: 3,
            retrieval_k: 3,
        };
        let kb = Mutex::new(KnowledgeBase::new());
        let out = refine_proofs(&repairer, input, &kb, 3).unwrap();
        assert_eq!(out.unresolved_sorries, 0);
        assert_eq!(out.source.trim_end(), proved.trim_end());
        assert_eq!(out.attempts, 1);
    }

    #[test]
    fn refine_discards_breaking_candidate() {
        let dir = TempDir::new().unwrap();
        let input = "theorem t : True := by sorry\n";
        let broken = "theorem t : True := by exact nope\n";
        stage_error(&dir, broken, "T.lean:1:29: error: unknown identifier 'nope'\n");
        let checker = MockChecker::new(dir.path());
        let broken_clone = broken.to_string();
        let gw = gateway_with(move |_| Ok(format!("```lean4\n{}```", broken_clone)));
        let repairer = Repairer {
            gateway: &gw,
            checker: &checker,
            template: None,
            max_correction_steps: 1,
            retrieval_k: 3,
        };
        let kb = Mutex::new(KnowledgeBase::new());
        let out = refine_proofs(&repairer, input, &kb, 2).unwrap();
        // candidate never accepted: output is the input, sorries unchanged
        assert_eq!(out.source, input);
        assert_eq!(out.unresolved_sorries, 1);
    }

    #[test]
    fn refine_with_no_sorries_is_a_no_op() {
        let dir = TempDir::new().unwrap();
        let checker = MockChecker::new(dir.path());
        let gw = gateway_with(|_| panic!("must not be called"));
        let repairer = Repairer {
            gateway: &gw,
            checker: &checker,
            template: None,
            max_correction_steps: 3,
            retrieval_k: 3,
        };
        let kb = Mutex::new(KnowledgeBase::new());
        let src = "theorem t : True := by trivial\n";
        let out = refine_proofs(&repairer, src, &kb, 3).unwrap();
        assert_eq!(out.source, src);
        assert_eq!(out.unresolved_sorries, 0);
        assert_eq!(gw.transcript_count(), 0);
    }
}
