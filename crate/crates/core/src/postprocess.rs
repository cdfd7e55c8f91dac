//! Final-stage cleanup: turn whatever the repair loop left behind into a
//! type-error-free file, and back-translate it to a natural-language report.
//!
//! Three phases. Phase 1 replaces failing proof bodies with `sorry`. Phase 2
//! comments out declarations whose statements are broken, together with
//! everything that references them (transitively, by token occurrence of the
//! declared name). Phase 3 is a bounded model-based rewrite accepted only if
//! it checks with zero errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{
    index_declarations, proof_body_delimiter, BodyDelimiter, CheckError, CheckReport,
    DeclCategory, DeclSpan, SourceChecker,
};
use crate::gateway::{bindings, extract_code_block, Gateway, GatewayError, BACKTRANSLATE, HARMLESS};

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("source is empty")]
    EmptySource,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Check(#[from] CheckError),
}

/// A declaration removed by phase 2, with its category kept for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommentedDecl {
    pub name: String,
    pub category: DeclCategory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalArtifact {
    pub source: String,
    pub fully_proved: bool,
    /// Declarations whose bodies still contain (or received) a sorry.
    pub sorried_decls: Vec<String>,
    pub commented_out_decls: Vec<CommentedDecl>,
    /// Compiles with zero errors.
    pub harmless: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HarmlessReport {
    pub phase1_sorried: Vec<String>,
    pub phase2_commented: Vec<CommentedDecl>,
    pub llm_attempts: u32,
    pub remaining_errors: usize,
    pub transcripts: Vec<u64>,
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\''
}

// `name.field` counts as a reference to `name`, but `Other.name` does not:
// a dot may follow the match, never precede it
fn occurs_as_token(haystack: &str, word: &str) -> bool {
    let mut from = 0;
    while let Some(rel) = haystack[from..].find(word) {
        let at = from + rel;
        let before_ok = haystack[..at]
            .chars()
            .next_back()
            .is_none_or(|c| !is_ident_char(c) && c != '.');
        let after_ok = haystack[at + word.len()..]
            .chars()
            .next()
            .is_none_or(|c| !is_ident_char(c));
        if before_ok && after_ok {
            return true;
        }
        from = at + word.len();
    }
    false
}

/// Indices of the spans to comment out: the seeds plus, transitively, every
/// span whose text mentions a removed declaration's name.
pub fn comment_closure(src: &str, spans: &[DeclSpan], seed_names: &[String]) -> Vec<usize> {
    let lines: Vec<&str> = src.lines().collect();
    let texts: Vec<String> = spans.iter().map(|s| s.text(&lines)).collect();
    let mut in_closure = vec![false; spans.len()];
    for (i, span) in spans.iter().enumerate() {
        if span.category != DeclCategory::Preamble && seed_names.contains(&span.name) {
            in_closure[i] = true;
        }
    }
    loop {
        let mut changed = false;
        let names: Vec<&str> = spans
            .iter()
            .enumerate()
            .filter(|(i, _)| in_closure[*i])
            .map(|(_, s)| s.name.as_str())
            .collect();
        for (i, span) in spans.iter().enumerate() {
            if in_closure[i] || span.category == DeclCategory::Preamble {
                continue;
            }
            if names.iter().any(|n| occurs_as_token(&texts[i], n)) {
                in_closure[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (0..spans.len()).filter(|i| in_closure[*i]).collect()
}

/// Replace the proof body of `span` with a single `sorry`, keeping every
/// statement byte before the body delimiter. For tactic bodies the lines
/// before the first failing line survive.
fn sorry_out_body(lines: &mut Vec<String>, span: &DeclSpan, first_error_line: usize) -> bool {
    let span_text = lines[span.start_line - 1..span.end_line].join("\n");
    let Some((delim_offset, kind)) = proof_body_delimiter(&span_text) else {
        return false;
    };
    // delimiter position relative to the span
    let rel_line = span_text[..delim_offset].matches('\n').count();
    let delim_line = span.start_line + rel_line;
    let line_start = span_text[..delim_offset].rfind('\n').map(|p| p + 1).unwrap_or(0);
    let col = delim_offset - line_start;

    match kind {
        BodyDelimiter::AssignBy if first_error_line > delim_line => {
            // keep the tactic lines before the failure
            let keep_until = first_error_line.max(delim_line + 1);
            let indent = "  ";
            lines.splice(
                keep_until - 1..span.end_line,
                std::iter::once(format!("{indent}sorry")),
            );
        }
        BodyDelimiter::AssignBy => {
            let head = &lines[delim_line - 1][..col];
            let delim_text = &span_text[delim_offset..];
            let by_rel = delim_text.find("by").expect("AssignBy has a by token");
            let new_line = format!("{}{} sorry", head, delim_text[..by_rel + 2].trim_end());
            lines.splice(delim_line - 1..span.end_line, std::iter::once(new_line));
        }
        BodyDelimiter::Assign => {
            let head = &lines[delim_line - 1][..col];
            let new_line = format!("{head}:= sorry");
            lines.splice(delim_line - 1..span.end_line, std::iter::once(new_line));
        }
        BodyDelimiter::Where => {
            // partial field lists are not valid; the whole body becomes a term
            let head = &lines[delim_line - 1][..col];
            let new_line = format!("{}:= sorry", head);
            lines.splice(delim_line - 1..span.end_line, std::iter::once(new_line));
        }
    }
    true
}

/// Line number (within the whole file) where the span's proof body starts,
/// or None when the span has no body delimiter.
fn body_position(src: &str, span: &DeclSpan) -> Option<(usize, usize)> {
    let lines: Vec<&str> = src.lines().collect();
    let span_text = span.text(&lines);
    let (offset, _) = proof_body_delimiter(&span_text)?;
    let rel_line = span_text[..offset].matches('\n').count();
    let line_start = span_text[..offset].rfind('\n').map(|p| p + 1).unwrap_or(0);
    Some((span.start_line + rel_line, offset - line_start))
}

pub struct Postprocessor<'a> {
    pub gateway: &'a Gateway,
    pub checker: &'a dyn SourceChecker,
    pub max_llm_attempts: u32,
}

impl<'a> Postprocessor<'a> {
    /// Produce a zero-error version of `src`, or the best candidate with
    /// `harmless = false` when every phase fails.
    pub fn harmless_fix(&self, src: &str) -> Result<(FinalArtifact, HarmlessReport), PostprocessError> {
        let mut report = HarmlessReport::default();
        let mut candidates: Vec<(String, usize)> = Vec::new();

        let check0 = self.checker.check_source(src)?;
        candidates.push((src.to_string(), check0.error_count));
        let mut cur = src.to_string();
        let mut cur_check = check0;

        // phase 1: sorry out failing proof bodies
        if cur_check.error_count > 0 {
            let next = self.phase1(&cur, &cur_check, &mut report);
            if next != cur {
                cur = next;
                cur_check = self.checker.check_source(&cur)?;
                candidates.push((cur.clone(), cur_check.error_count));
            }
        }

        // phase 2: comment out broken statements and their dependents
        if cur_check.error_count > 0 {
            let next = self.phase2(&cur, &cur_check, &mut report);
            if next != cur {
                cur = next;
                cur_check = self.checker.check_source(&cur)?;
                candidates.push((cur.clone(), cur_check.error_count));
            }
        }

        // phase 3: bounded model rewrite, zero-error candidates only
        let mut attempt = 0;
        while cur_check.error_count > 0 && attempt < self.max_llm_attempts {
            attempt += 1;
            report.llm_attempts = attempt;
            let errors = format_error_sections(&cur, &cur_check);
            let prompt = self.gateway.render_prompt(
                HARMLESS,
                &bindings([("current_code", cur.as_str()), ("error_sections", errors.as_str())]),
            )?;
            let completion = self.gateway.complete(&prompt)?;
            report.transcripts.push(self.gateway.last_request_id());
            let candidate = match extract_code_block(&completion) {
                Ok(code) => {
                    let mut c = code;
                    if !c.is_empty() && !c.ends_with('\n') {
                        c.push('\n');
                    }
                    c
                }
                Err(GatewayError::EmptyCompletion) => continue,
                Err(e) => return Err(e.into()),
            };
            let candidate_check = self.checker.check_source(&candidate)?;
            candidates.push((candidate.clone(), candidate_check.error_count));
            if candidate_check.error_count == 0 {
                cur = candidate;
                cur_check = candidate_check;
            }
        }

        if cur_check.error_count > 0 {
            // all phases failed: return the best candidate seen
            let best = candidates
                .iter()
                .min_by_key(|(_, errors)| *errors)
                .expect("input is always a candidate")
                .clone();
            cur = best.0;
            cur_check = self.checker.check_source(&cur)?;
        }
        report.remaining_errors = cur_check.error_count;

        let final_spans = index_declarations(&cur);
        let sorried: Vec<String> = final_spans
            .iter()
            .filter(|s| s.category != DeclCategory::Preamble && s.has_sorry)
            .map(|s| s.name.clone())
            .collect();
        let harmless = cur_check.error_count == 0;
        let artifact = FinalArtifact {
            fully_proved: harmless && sorried.is_empty() && report.phase2_commented.is_empty(),
            sorried_decls: sorried,
            commented_out_decls: report.phase2_commented.clone(),
            harmless,
            source: cur,
        };
        Ok((artifact, report))
    }

    fn phase1(&self, src: &str, check: &CheckReport, report: &mut HarmlessReport) -> String {
        let mut lines: Vec<String> = src.lines().map(String::from).collect();
        // bottom-up so earlier spans keep their line numbers while we splice
        let mut targets: Vec<(&DeclSpan, usize)> = Vec::new();
        for span in check
            .decls
            .iter()
            .filter(|s| matches!(s.category, DeclCategory::Theorem | DeclCategory::Instance) && s.body_is_proof)
        {
            let Some((body_line, body_col)) = body_position(src, span) else {
                continue;
            };
            let proof_errors: Vec<usize> = check
                .errors()
                .filter(|d| d.decl.as_deref() == Some(span.name.as_str()))
                .filter(|d| d.line > body_line || (d.line == body_line && d.col >= body_col))
                .map(|d| d.line)
                .collect();
            if let Some(first) = proof_errors.iter().min() {
                targets.push((span, *first));
            }
        }
        targets.sort_by_key(|(s, _)| std::cmp::Reverse(s.start_line));
        for (span, first_error_line) in targets {
            if sorry_out_body(&mut lines, span, first_error_line) {
                report.phase1_sorried.push(span.name.clone());
            }
        }
        let mut out = lines.join("\n");
        if src.ends_with('\n') {
            out.push('\n');
        }
        out
    }

    fn phase2(&self, src: &str, check: &CheckReport, report: &mut HarmlessReport) -> String {
        let seeds: Vec<String> = check
            .errors()
            .filter_map(|d| d.decl.clone())
            .collect();
        if seeds.is_empty() {
            return src.to_string();
        }
        let closure = comment_closure(src, &check.decls, &seeds);
        if closure.is_empty() {
            return src.to_string();
        }
        let mut lines: Vec<String> = src.lines().map(String::from).collect();
        for &i in &closure {
            let span = &check.decls[i];
            report.phase2_commented.push(CommentedDecl {
                name: span.name.clone(),
                category: span.category,
            });
            for line in lines.iter_mut().take(span.end_line).skip(span.start_line - 1) {
                if !line.trim().is_empty() {
                    *line = format!("-- {line}");
                }
            }
        }
        let mut out = lines.join("\n");
        if src.ends_with('\n') {
            out.push('\n');
        }
        out
    }

    /// Render the natural-language report for a final file and count-check
    /// one titled block per declaration. Returns (report, warning).
    pub fn backtranslate(&self, src: &str) -> Result<(String, Option<String>), PostprocessError> {
        if src.trim().is_empty() {
            return Err(PostprocessError::EmptySource);
        }
        let prompt = self
            .gateway
            .render_prompt(BACKTRANSLATE, &bindings([("lean_content", src)]))?;
        let report = self.gateway.complete(&prompt)?;
        let decl_count = index_declarations(src)
            .iter()
            .filter(|s| s.category != DeclCategory::Preamble)
            .count();
        let block_count = ["definition", "lemma", "theorem", "proposition", "corollary"]
            .iter()
            .map(|env| report.matches(&format!("\\begin{{{env}}}")).count())
            .sum::<usize>();
        let warning = if block_count != decl_count {
            Some(format!(
                "backtranslation has {block_count} titled blocks for {decl_count} declarations"
            ))
        } else {
            None
        };
        Ok((report, warning))
    }
}

fn format_error_sections(src: &str, check: &CheckReport) -> String {
    let lines: Vec<&str> = src.lines().collect();
    let mut out = String::new();
    for (i, diag) in check.errors().enumerate() {
        let lo = diag.line.saturating_sub(3);
        let hi = (diag.line + 2).min(lines.len());
        let context = if lo < hi { lines[lo..hi].join("\n") } else { String::new() };
        out.push_str(&format!(
            "[Error {}]\n\nLine: {}\n\nError: {}\n\n[Context] {}\n\n",
            i + 1,
            diag.line,
            diag.message,
            context
        ));
    }
    out.trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::MockChecker;
    use crate::gateway::{FnBackend, GenParams, PromptLibrary};
    use std::fs;
    use tempfile::TempDir;

    fn gateway_with(
        f: impl Fn(&str) -> Result<String, GatewayError> + Send + Sync + 'static,
    ) -> Gateway {
        Gateway::new(Box::new(FnBackend(f)), PromptLibrary::builtin(), GenParams::default())
    }

    fn never_called() -> Gateway {
        gateway_with(|_| panic!("gateway must not be called"))
    }

    fn stage(dir: &TempDir, src: &str, raw: &str) {
        fs::write(MockChecker::fixture_path_for(dir.path(), src), raw).unwrap();
    }

    #[test]
    fn clean_fully_proved_file_is_unchanged() {
        let dir = TempDir::new().unwrap();
        let checker = MockChecker::new(dir.path());
        let gw = never_called();
        let post = Postprocessor { gateway: &gw, checker: &checker, max_llm_attempts: 2 };
        let src = "def a := 1\ntheorem t : True := by trivial\n";
        let (artifact, _) = post.harmless_fix(src).unwrap();
        assert_eq!(artifact.source, src);
        assert!(artifact.fully_proved);
        assert!(artifact.harmless);
        assert!(artifact.sorried_decls.is_empty());
        assert!(artifact.commented_out_decls.is_empty());
    }

    #[test]
    fn phase1_sorries_failing_tactic_tail() {
        let dir = TempDir::new().unwrap();
        let src = "theorem t : True := by\n  have h : 1 = 1 := rfl\n  exact broken h\n";
        stage(&dir, src, "T.lean:3:8: error: unknown identifier 'broken'\n");
        let checker = MockChecker::new(dir.path());
        let gw = never_called();
        let post = Postprocessor { gateway: &gw, checker: &checker, max_llm_attempts: 2 };
        let (artifact, report) = post.harmless_fix(src).unwrap();
        assert!(artifact.harmless);
        assert_eq!(report.phase1_sorried, vec!["t".to_string()]);
        assert_eq!(artifact.sorried_decls, vec!["t".to_string()]);
        // the passing tactic line before the failure survives
        assert!(artifact.source.contains("have h : 1 = 1 := rfl"));
        assert!(artifact.source.contains("sorry"));
        assert!(!artifact.source.contains("broken"));
        assert!(!artifact.fully_proved);
    }

    #[test]
    fn phase1_error_on_delimiter_line_keeps_statement() {
        let dir = TempDir::new().unwrap();
        let src = "theorem t : 1 = 1 := by exact broken\n";
        stage(&dir, src, "T.lean:1:27: error: unknown identifier 'broken'\n");
        let checker = MockChecker::new(dir.path());
        let gw = never_called();
        let post = Postprocessor { gateway: &gw, checker: &checker, max_llm_attempts: 2 };
        let (artifact, _) = post.harmless_fix(src).unwrap();
        assert_eq!(artifact.source, "theorem t : 1 = 1 := by sorry\n");
    }

    #[test]
    fn phase2_comments_out_transitive_dependents() {
        let dir = TempDir::new().unwrap();
        let src = "def base := broken_ref\ndef mid := base + 1\ntheorem uses_mid : mid = mid := by rfl\ndef free := 42\n";
        stage(&dir, src, "T.lean:1:12: error: unknown identifier 'broken_ref'\n");
        let checker = MockChecker::new(dir.path());
        let gw = never_called();
        let post = Postprocessor { gateway: &gw, checker: &checker, max_llm_attempts: 2 };
        let (artifact, report) = post.harmless_fix(src).unwrap();
        assert!(artifact.harmless);
        let commented: Vec<&str> = report.phase2_commented.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(commented, vec!["base", "mid", "uses_mid"]);
        assert!(artifact.source.contains("-- def base"));
        assert!(artifact.source.contains("-- def mid"));
        assert!(artifact.source.contains("-- theorem uses_mid"));
        assert!(artifact.source.contains("\ndef free := 42"));
        assert!(!artifact.fully_proved);
    }

    #[test]
    fn phase3_accepts_only_zero_error_candidates() {
        let dir = TempDir::new().unwrap();
        // a preamble error: neither phase 1 nor phase 2 applies
        let src = "import Nonexistent\ndef a := 1\n";
        stage(&dir, src, "T.lean:1:0: error: unknown identifier 'Nonexistent'\n");
        let rewritten = "import Mathlib\ndef a := 1\n";
        let checker = MockChecker::new(dir.path());
        let calls = std::sync::atomic::AtomicU32::new(0);
        let rewritten_clone = rewritten.to_string();
        let gw = gateway_with(move |_| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(format!("```lean\n{}```", rewritten_clone))
        });
        let post = Postprocessor { gateway: &gw, checker: &checker, max_llm_attempts: 2 };
        let (artifact, report) = post.harmless_fix(src).unwrap();
        assert!(artifact.harmless);
        assert_eq!(artifact.source, rewritten);
        assert_eq!(report.llm_attempts, 1);
    }

    #[test]
    fn all_phases_failing_returns_best_candidate_unharmed() {
        let dir = TempDir::new().unwrap();
        let src = "import Broken\ndef a := 1\n";
        stage(&dir, src, "T.lean:1:0: error: unknown identifier 'Broken'\n");
        let worse = "total garbage\n";
        stage(&dir, worse, "T.lean:1:0: error: expected term\nT.lean:1:1: error: expected term\n");
        let checker = MockChecker::new(dir.path());
        let worse_clone = worse.to_string();
        let gw = gateway_with(move |_| Ok(format!("```lean\n{}```", worse_clone)));
        let post = Postprocessor { gateway: &gw, checker: &checker, max_llm_attempts: 2 };
        let (artifact, report) = post.harmless_fix(src).unwrap();
        assert!(!artifact.harmless);
        assert_eq!(artifact.source, src, "best candidate is the 1-error input");
        assert_eq!(report.llm_attempts, 2);
        assert_eq!(report.remaining_errors, 1);
        assert!(!artifact.fully_proved);
    }

    #[test]
    fn closure_follows_projection_uses_only_forward() {
        // `base.out` is a use of `base`; `Other.base` is not a use of `base`
        let src = "def base := broken\ndef uses_proj := base.out\ndef Other.base := 1\ndef keeps := Other.base\n";
        let spans = index_declarations(src);
        let closure = comment_closure(src, &spans, &["base".to_string()]);
        let names: Vec<&str> = closure.iter().map(|&i| spans[i].name.as_str()).collect();
        assert!(names.contains(&"uses_proj"));
        assert!(!names.contains(&"Other.base"));
        assert!(!names.contains(&"keeps"));
    }

    #[test]
    fn backtranslate_counts_blocks() {
        let dir = TempDir::new().unwrap();
        let checker = MockChecker::new(dir.path());
        let gw = gateway_with(|prompt| {
            assert!(prompt.contains("LaTeX-formatted technical report"));
            Ok("\\begin{definition}D\\end{definition}\n\\begin{theorem}T\\end{theorem}".into())
        });
        let post = Postprocessor { gateway: &gw, checker: &checker, max_llm_attempts: 2 };
        let src = "def a := 1\ntheorem t : True := by trivial\n";
        let (report, warning) = post.backtranslate(src).unwrap();
        assert!(report.contains("\\begin{definition}"));
        assert!(warning.is_none());

        let (_, warning) = post.backtranslate("def a := 1\ndef b := 2\ntheorem t : True := by trivial\n").unwrap();
        assert!(warning.is_some(), "2 blocks for 3 declarations must warn");
    }

    #[test]
    fn backtranslate_rejects_empty_source() {
        let dir = TempDir::new().unwrap();
        let checker = MockChecker::new(dir.path());
        let gw = never_called();
        let post = Postprocessor { gateway: &gw, checker: &checker, max_llm_attempts: 2 };
        assert!(matches!(
            post.backtranslate("  \n"),
            Err(PostprocessError::EmptySource)
        ));
    }

    #[test]
    fn closure_matches_brute_force_on_small_fixture() {
        let src = "def a := broken\ndef b := a\ndef c := b\ndef d := 1\ntheorem t : c = c := by rfl\n";
        let spans = index_declarations(src);
        let closure = comment_closure(src, &spans, &["a".to_string()]);
        // independent fixed-point reference over dotted tokens
        let refers = |text: &str, name: &str| {
            text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '\'' || c == '.'))
                .any(|tok| tok == name || tok.starts_with(&format!("{name}.")))
        };
        let lines: Vec<&str> = src.lines().collect();
        let mut reference: Vec<String> = vec!["a".to_string()];
        loop {
            let mut grew = false;
            for s in spans.iter().filter(|s| s.category != DeclCategory::Preamble) {
                if reference.contains(&s.name) {
                    continue;
                }
                let text = s.text(&lines);
                if reference.iter().any(|n| refers(&text, n)) {
                    reference.push(s.name.clone());
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        let closure_names: Vec<&str> = closure.iter().map(|&i| spans[i].name.as_str()).collect();
        let mut reference_sorted: Vec<&str> = reference.iter().map(|s| s.as_str()).collect();
        reference_sorted.sort();
        let mut closure_sorted = closure_names.clone();
        closure_sorted.sort();
        assert_eq!(closure_sorted, reference_sorted);
        assert!(!closure_names.contains(&"d"));
    }
}
