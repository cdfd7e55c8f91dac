//! Line-level declaration indexing. Top-level keyword heuristics only; this
//! is deliberately not a Lean parser.

use serde::{Deserialize, Serialize};

use super::diagnostics::Diagnostic;
use crate::lexer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclCategory {
    Definition,
    Theorem,
    Instance,
    Preamble,
}

/// A contiguous block of source lines owned by one declaration (or by
/// preamble text between declarations). Spans partition the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclSpan {
    pub name: String,
    pub category: DeclCategory,
    /// 1-based, inclusive.
    pub start_line: usize,
    /// 1-based, inclusive.
    pub end_line: usize,
    pub has_sorry: bool,
    pub body_is_proof: bool,
}

impl DeclSpan {
    pub fn contains_line(&self, line: usize) -> bool {
        line >= self.start_line && line <= self.end_line
    }

    pub fn text(&self, lines: &[&str]) -> String {
        lines[self.start_line - 1..self.end_line].join("\n")
    }
}

const MODIFIERS: &[&str] = &["private", "protected", "noncomputable", "partial", "unsafe", "scoped"];

/// Keyword categories. `local notation` is handled before modifier stripping;
/// anything unlisted continues the current span.
fn keyword_category(word: &str) -> Option<DeclCategory> {
    match word {
        "def" | "abbrev" | "class" | "structure" => Some(DeclCategory::Definition),
        "theorem" | "lemma" => Some(DeclCategory::Theorem),
        "instance" => Some(DeclCategory::Instance),
        "import" | "open" | "variable" | "variables" | "section" | "end" | "set_option"
        | "notation" => Some(DeclCategory::Preamble),
        _ => None,
    }
}

/// Parse a top-level line into (category, declared name). Returns `None` for
/// continuation lines.
fn classify_line(line: &str) -> Option<(DeclCategory, Option<String>)> {
    if line.starts_with(char::is_whitespace) || line.is_empty() {
        return None;
    }
    let mut words = line.split_whitespace().peekable();
    let mut first = words.next()?;
    if first == "local" {
        // `local notation ...` and friends are preamble
        first = words.next()?;
        return keyword_category(first).map(|_| (DeclCategory::Preamble, None));
    }
    while MODIFIERS.contains(&first) {
        first = words.next()?;
    }
    let category = keyword_category(first)?;
    if category == DeclCategory::Preamble {
        return Some((DeclCategory::Preamble, None));
    }
    let name = words.next().and_then(|tok| {
        let cleaned: String = tok
            .chars()
            .take_while(|c| !['(', '{', '[', ':', '⟨'].contains(c))
            .collect();
        if cleaned.is_empty() {
            None
        } else {
            Some(cleaned)
        }
    });
    Some((category, name))
}

/// Index declarations: every top-level declaration keyword opens a span that
/// ends just before the next top-level keyword or end of file; preamble spans
/// fill the gaps. Concatenating span texts in order reconstructs the file.
pub fn index_declarations(src: &str) -> Vec<DeclSpan> {
    let lines: Vec<&str> = src.lines().collect();
    if lines.is_empty() {
        return Vec::new();
    }
    let classes = lexer::classify(src);

    // byte offset of each line start, for comment-state lookups
    let mut offsets = Vec::with_capacity(lines.len());
    let mut pos = 0;
    for line in &lines {
        offsets.push(pos);
        pos += line.len() + 1;
    }

    struct Open {
        name: String,
        category: DeclCategory,
        start: usize,
    }
    let mut spans: Vec<DeclSpan> = Vec::new();
    let mut open: Option<Open> = None;
    let close = |open: &mut Option<Open>, end: usize, spans: &mut Vec<DeclSpan>| {
        if let Some(o) = open.take() {
            spans.push(DeclSpan {
                name: o.name,
                category: o.category,
                start_line: o.start,
                end_line: end,
                has_sorry: false,
                body_is_proof: false,
            });
        }
    };

    for (i, line) in lines.iter().enumerate() {
        let lineno = i + 1;
        let in_code = lexer::line_starts_in_code(&classes, offsets[i]);
        let classified = if in_code { classify_line(line) } else { None };
        match classified {
            Some((DeclCategory::Preamble, _)) => {
                if open.as_ref().map(|o| o.category) != Some(DeclCategory::Preamble) {
                    close(&mut open, i, &mut spans);
                    open = Some(Open {
                        name: String::new(),
                        category: DeclCategory::Preamble,
                        start: lineno,
                    });
                }
            }
            Some((category, name)) => {
                close(&mut open, i, &mut spans);
                let name = name.unwrap_or_else(|| format!("instance@{lineno}"));
                open = Some(Open {
                    name,
                    category,
                    start: lineno,
                });
            }
            None => {
                if open.is_none() {
                    open = Some(Open {
                        name: String::new(),
                        category: DeclCategory::Preamble,
                        start: lineno,
                    });
                }
            }
        }
    }
    close(&mut open, lines.len(), &mut spans);

    // fill sorry and proof-body flags
    let sorry_lines = scan_sorries(src);
    for span in &mut spans {
        span.has_sorry = sorry_lines
            .iter()
            .any(|&l| l >= span.start_line && l <= span.end_line);
        if matches!(span.category, DeclCategory::Theorem | DeclCategory::Instance) {
            span.body_is_proof = proof_body_delimiter(&span.text(&lines)).is_some();
        }
    }
    spans
}

/// Where a declaration's proof body starts, if it has one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyDelimiter {
    /// `:= by` — tactic block.
    AssignBy,
    /// `:=` — term body.
    Assign,
    /// `where` — field block.
    Where,
}

/// Find the first proof-body delimiter (`:= by`, `:=`, or `where`) in a
/// declaration's text, outside comments and strings. Returns the byte offset
/// where the delimiter token starts and its kind.
pub fn proof_body_delimiter(decl_text: &str) -> Option<(usize, BodyDelimiter)> {
    let masked = lexer::mask_non_code(decl_text);
    let assign = masked.find(":=");
    let where_pos = find_word(&masked, "where");
    match (assign, where_pos) {
        (Some(a), Some(w)) if w < a => Some((w, BodyDelimiter::Where)),
        (Some(a), _) => {
            let after = masked[a + 2..].trim_start();
            if after.starts_with("by")
                && after[2..]
                    .chars()
                    .next()
                    .is_none_or(|c| !is_ident_char(c))
            {
                Some((a, BodyDelimiter::AssignBy))
            } else {
                Some((a, BodyDelimiter::Assign))
            }
        }
        (None, Some(w)) => Some((w, BodyDelimiter::Where)),
        (None, None) => None,
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\''
}

fn find_word(haystack: &str, word: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(rel) = haystack[from..].find(word) {
        let at = from + rel;
        let before_ok = haystack[..at].chars().next_back().is_none_or(|c| !is_ident_char(c));
        let after_ok = haystack[at + word.len()..]
            .chars()
            .next()
            .is_none_or(|c| !is_ident_char(c));
        if before_ok && after_ok {
            return Some(at);
        }
        from = at + word.len();
    }
    None
}

/// 1-based lines of every `sorry` token outside comments and strings.
pub fn scan_sorries(src: &str) -> Vec<usize> {
    let masked = lexer::mask_non_code(src);
    let mut out = Vec::new();
    for (i, line) in masked.lines().enumerate() {
        let mut from = 0;
        while let Some(rel) = line[from..].find("sorry") {
            let at = from + rel;
            let before_ok = line[..at].chars().next_back().is_none_or(|c| !is_ident_char(c));
            let after_ok = line[at + 5..].chars().next().is_none_or(|c| !is_ident_char(c));
            if before_ok && after_ok {
                out.push(i + 1);
            }
            from = at + 5;
        }
    }
    out
}

/// Assign each diagnostic to the declaration whose span contains its line.
/// Preamble (and out-of-range) diagnostics get no declaration.
pub fn attribute_diagnostics(diags: &[Diagnostic], spans: &[DeclSpan]) -> Vec<Diagnostic> {
    diags
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.decl = spans
                .iter()
                .find(|s| s.contains_line(d.line))
                .filter(|s| s.category != DeclCategory::Preamble)
                .map(|s| s.name.clone());
            d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::diagnostics::{normalize_error, Severity};

    fn diag(line: usize) -> Diagnostic {
        Diagnostic {
            file: "T.lean".into(),
            line,
            col: 0,
            severity: Severity::Error,
            message: "expected term".into(),
            kind: normalize_error("expected term"),
            decl: None,
        }
    }

    const SAMPLE: &str = "import Mathlib\n\nclass Lasso_pro (A b μ) where\n  hA : A ≠ 0\n\ndef Lasso_pro.f (self : Lasso_pro A b μ) : ℝ := 0\n\ninstance Lasso_pro.composite_pro : composite_pro f g where\n\ntheorem Lasso_convergence : True := by sorry\n";

    #[test]
    fn categories_follow_keyword_rule() {
        let spans = index_declarations(SAMPLE);
        let named: Vec<(&str, DeclCategory)> = spans
            .iter()
            .filter(|s| s.category != DeclCategory::Preamble)
            .map(|s| (s.name.as_str(), s.category))
            .collect();
        assert_eq!(
            named,
            vec![
                ("Lasso_pro", DeclCategory::Definition),
                ("Lasso_pro.f", DeclCategory::Definition),
                ("Lasso_pro.composite_pro", DeclCategory::Instance),
                ("Lasso_convergence", DeclCategory::Theorem),
            ]
        );
    }

    #[test]
    fn empty_file_has_no_spans() {
        assert!(index_declarations("").is_empty());
    }

    #[test]
    fn imports_only_file_is_one_preamble_span() {
        let spans = index_declarations("import Mathlib\nopen Set\n");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].category, DeclCategory::Preamble);
        assert_eq!((spans[0].start_line, spans[0].end_line), (1, 2));
    }

    #[test]
    fn spans_partition_the_file() {
        let spans = index_declarations(SAMPLE);
        let lines: Vec<&str> = SAMPLE.lines().collect();
        let mut expect = 1;
        for s in &spans {
            assert_eq!(s.start_line, expect, "gap or overlap at {}", s.start_line);
            expect = s.end_line + 1;
        }
        assert_eq!(expect, lines.len() + 1);
        let rebuilt: Vec<String> = spans.iter().map(|s| s.text(&lines)).collect();
        assert_eq!(rebuilt.join("\n"), lines.join("\n"));
    }

    #[test]
    fn sorry_scanning_respects_comments_and_strings() {
        assert_eq!(scan_sorries("theorem t : True := by sorry"), vec![1]);
        assert_eq!(scan_sorries("-- sorry"), Vec::<usize>::new());
        assert_eq!(scan_sorries("example := \"sorry\""), Vec::<usize>::new());
        assert_eq!(scan_sorries("/- sorry -/ def a := 1"), Vec::<usize>::new());
        assert_eq!(scan_sorries("def sorrytail := 1"), Vec::<usize>::new());
    }

    #[test]
    fn proof_body_flags() {
        let spans = index_declarations(SAMPLE);
        let thm = spans.iter().find(|s| s.name == "Lasso_convergence").unwrap();
        assert!(thm.body_is_proof);
        assert!(thm.has_sorry);
        let inst = spans.iter().find(|s| s.name == "Lasso_pro.composite_pro").unwrap();
        assert!(inst.body_is_proof); // `where` body
        let def = spans.iter().find(|s| s.name == "Lasso_pro.f").unwrap();
        assert!(!def.body_is_proof); // definitions never count as proofs
    }

    #[test]
    fn delimiters_detected_in_order() {
        assert_eq!(
            proof_body_delimiter("theorem t : True := by simp").map(|x| x.1),
            Some(BodyDelimiter::AssignBy)
        );
        assert_eq!(
            proof_body_delimiter("theorem t : True := trivial").map(|x| x.1),
            Some(BodyDelimiter::Assign)
        );
        assert_eq!(
            proof_body_delimiter("instance i : C where\n  t := 1").map(|x| x.1),
            Some(BodyDelimiter::Where)
        );
        assert_eq!(proof_body_delimiter("theorem t : True"), None);
    }

    #[test]
    fn attribution_is_total_and_exclusive() {
        let spans = index_declarations(SAMPLE);
        let diags = vec![diag(1), diag(6), diag(10)];
        let attributed = attribute_diagnostics(&diags, &spans);
        assert_eq!(attributed[0].decl, None); // import line
        assert_eq!(attributed[1].decl.as_deref(), Some("Lasso_pro.f"));
        assert_eq!(attributed[2].decl.as_deref(), Some("Lasso_convergence"));
        // partition: every diagnostic assigned exactly once
        let total = attributed.len();
        let with_decl = attributed.iter().filter(|d| d.decl.is_some()).count();
        let preamble = attributed.iter().filter(|d| d.decl.is_none()).count();
        assert_eq!(with_decl + preamble, total);
    }

    #[test]
    fn anonymous_instance_gets_synthetic_name() {
        let spans = index_declarations("instance : Foo Bar where\n  x := 1\n");
        assert_eq!(spans[0].name, "instance@1");
        assert_eq!(spans[0].category, DeclCategory::Instance);
    }

    #[test]
    fn commented_keyword_does_not_open_span() {
        let src = "def a := 1\n/-\ntheorem ghost : True := by sorry\n-/\ndef b := 2\n";
        let spans = index_declarations(src);
        let names: Vec<&str> = spans.iter().map(|s| s.name.as_str()).collect();
        assert!(!names.contains(&"ghost"));
        assert!(names.contains(&"a"));
        assert!(names.contains(&"b"));
    }
}
