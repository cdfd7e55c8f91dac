//! Deterministic rewrite rules applied before every model-based correction.
//!
//! Rules run in a fixed order and the whole pipeline is iterated to a fixed
//! point, so `apply_rules` is idempotent by construction. No rule ever edits
//! text inside string literals or comments.

use crate::lexer;

/// One rewrite rule: id, what it does, and the transform.
pub struct RewriteRule {
    pub id: &'static str,
    pub description: &'static str,
    apply: fn(&str) -> String,
}

/// The shipped ruleset, in application order.
pub fn ruleset() -> &'static [RewriteRule] {
    &RULES
}

static RULES: [RewriteRule; 7] = [
    RewriteRule {
        id: "strip_fences",
        description: "remove residual markdown code-fence lines",
        apply: strip_fences,
    },
    RewriteRule {
        id: "dedup_imports",
        description: "drop exact duplicates of earlier import/open lines",
        apply: dedup_imports,
    },
    RewriteRule {
        id: "empty_sections",
        description: "remove section ... end pairs with nothing between them",
        apply: remove_empty_sections,
    },
    RewriteRule {
        id: "debug_commands",
        description: "remove #check, #eval and #print lines",
        apply: remove_debug_commands,
    },
    RewriteRule {
        id: "unicode_whitelist",
        description: "rewrite whitelisted ASCII fallbacks (\\R, \\to, \\forall, ->) to Unicode",
        apply: normalize_unicode,
    },
    RewriteRule {
        id: "unused_variables",
        description: "drop file-scope variable binders whose names never occur later",
        apply: remove_unused_variables,
    },
    RewriteRule {
        id: "section_end",
        description: "append the missing end for an unclosed section header",
        apply: ensure_section_end,
    },
];

/// Apply the full ordered ruleset to a fixed point. Returns the rewritten
/// source and the ids of every rule that changed it.
pub fn apply_rules(src: &str) -> (String, Vec<&'static str>) {
    let mut current = src.to_string();
    let mut applied: Vec<&'static str> = Vec::new();
    // two passes almost always suffice; the cap guards a rule interaction bug
    for _ in 0..8 {
        let mut changed = false;
        for rule in &RULES {
            let next = (rule.apply)(&current);
            if next != current {
                changed = true;
                if !applied.contains(&rule.id) {
                    applied.push(rule.id);
                }
                current = next;
            }
        }
        if !changed {
            break;
        }
    }
    (current, applied)
}

struct Lines<'a> {
    lines: Vec<&'a str>,
    in_code: Vec<bool>,
    trailing_newline: bool,
}

fn split(src: &str) -> Lines<'_> {
    let classes = lexer::classify(src);
    let lines: Vec<&str> = src.lines().collect();
    let mut in_code = Vec::with_capacity(lines.len());
    let mut pos = 0;
    for line in &lines {
        in_code.push(lexer::line_starts_in_code(&classes, pos));
        pos += line.len() + 1;
    }
    Lines {
        lines,
        in_code,
        trailing_newline: src.ends_with('\n'),
    }
}

fn join(kept: Vec<&str>, trailing_newline: bool) -> String {
    if kept.is_empty() {
        return String::new();
    }
    let mut out = kept.join("\n");
    if trailing_newline {
        out.push('\n');
    }
    out
}

fn strip_fences(src: &str) -> String {
    let split = split(src);
    let kept: Vec<&str> = split
        .lines
        .iter()
        .zip(&split.in_code)
        .filter(|(line, in_code)| !(**in_code && line.trim_start().starts_with("```")))
        .map(|(line, _)| *line)
        .collect();
    join(kept, split.trailing_newline)
}

fn dedup_imports(src: &str) -> String {
    let split = split(src);
    let mut seen: Vec<&str> = Vec::new();
    let mut kept: Vec<&str> = Vec::new();
    for (line, in_code) in split.lines.iter().zip(&split.in_code) {
        let trimmed = line.trim();
        let dedupable =
            *in_code && (trimmed.starts_with("import ") || trimmed.starts_with("open "));
        if dedupable {
            if seen.contains(&trimmed) {
                continue;
            }
            seen.push(trimmed);
        }
        kept.push(line);
    }
    join(kept, split.trailing_newline)
}

/// `section X` / `noncomputable section X` header name, if this line is one.
fn section_open_name(line: &str) -> Option<&str> {
    let mut words = line.split_whitespace();
    let mut first = words.next()?;
    while first == "noncomputable" || first == "private" {
        first = words.next()?;
    }
    if first != "section" {
        return None;
    }
    Some(words.next().unwrap_or(""))
}

fn section_close_name(line: &str) -> Option<&str> {
    let mut words = line.split_whitespace();
    if words.next()? != "end" {
        return None;
    }
    Some(words.next().unwrap_or(""))
}

fn remove_empty_sections(src: &str) -> String {
    let split = split(src);
    let n = split.lines.len();
    let mut remove = vec![false; n];
    let mut changed = false;
    for i in 0..n {
        if remove[i] || !split.in_code[i] {
            continue;
        }
        let Some(open_name) = section_open_name(split.lines[i]) else {
            continue;
        };
        let mut j = i + 1;
        while j < n && split.lines[j].trim().is_empty() {
            j += 1;
        }
        if j < n && split.in_code[j] && section_close_name(split.lines[j]) == Some(open_name) {
            for flag in remove.iter_mut().take(j + 1).skip(i) {
                *flag = true;
            }
            changed = true;
        }
    }
    if !changed {
        return src.to_string();
    }
    let kept: Vec<&str> = split
        .lines
        .iter()
        .enumerate()
        .filter(|(i, _)| !remove[*i])
        .map(|(_, l)| *l)
        .collect();
    join(kept, split.trailing_newline)
}

fn remove_debug_commands(src: &str) -> String {
    let split = split(src);
    let kept: Vec<&str> = split
        .lines
        .iter()
        .zip(&split.in_code)
        .filter(|(line, in_code)| {
            let t = line.trim_start();
            !(**in_code
                && (t.starts_with("#check") || t.starts_with("#eval") || t.starts_with("#print")))
        })
        .map(|(line, _)| *line)
        .collect();
    join(kept, split.trailing_newline)
}

/// Explicit whitelist only. `=>` stays (lambda arrow), `<->` stays, a bare
/// `R` is never rewritten to ℝ.
fn normalize_unicode(src: &str) -> String {
    let classes = lexer::classify(src);
    let bytes = src.as_bytes();
    let mut out = String::with_capacity(src.len());
    let mut i = 0;
    let letter_follows = |at: usize| {
        src[at..]
            .chars()
            .next()
            .map(|c| c.is_ascii_alphabetic())
            .unwrap_or(false)
    };
    while i < bytes.len() {
        let in_code = matches!(classes[i], lexer::ByteClass::Code);
        if in_code && src[i..].starts_with("\\forall") && !letter_follows(i + 7) {
            out.push('∀');
            i += 7;
        } else if in_code && src[i..].starts_with("\\to") && !letter_follows(i + 3) {
            out.push('→');
            i += 3;
        } else if in_code && src[i..].starts_with("\\R") && !letter_follows(i + 2) {
            out.push('ℝ');
            i += 2;
        } else if in_code
            && src[i..].starts_with("->")
            && !(i > 0 && bytes[i - 1] == b'<')
        {
            out.push('→');
            i += 2;
        } else {
            let ch = src[i..].chars().next().unwrap();
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    out
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\''
}

// `x.proj` is a use of the binder `x`; `Other.x` is a different identifier
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

/// One bracketed binder group of a `variable` line.
struct BinderGroup {
    text: String,
    names: Vec<String>,
}

fn parse_binder_groups(rest: &str) -> Option<Vec<BinderGroup>> {
    let mut groups = Vec::new();
    let chars: Vec<char> = rest.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let close = match c {
            '(' => ')',
            '{' => '}',
            '[' => ']',
            '⦃' => '⦄',
            _ => return None, // unbracketed binder syntax: leave the line alone
        };
        let open = c;
        let start = i;
        let mut depth = 0;
        let mut colon_at_top: Option<usize> = None;
        loop {
            if i >= chars.len() {
                return None; // unbalanced: leave the line alone
            }
            let ch = chars[i];
            if ch == open {
                depth += 1;
            } else if ch == close {
                depth -= 1;
                if depth == 0 {
                    break;
                }
            } else if ch == ':' && depth == 1 && colon_at_top.is_none() {
                colon_at_top = Some(i);
            }
            i += 1;
        }
        let end = i;
        i += 1;
        let text: String = chars[start..=end].iter().collect();
        let names = match (open, colon_at_top) {
            // instance-implicit binders resolve without name references
            ('[', _) => Vec::new(),
            (_, Some(colon)) => chars[start + 1..colon]
                .iter()
                .collect::<String>()
                .split_whitespace()
                .map(|s| s.to_string())
                .collect(),
            (_, None) => Vec::new(),
        };
        groups.push(BinderGroup { text, names });
    }
    Some(groups)
}

fn remove_unused_variables(src: &str) -> String {
    let split = split(src);
    let n = split.lines.len();
    let mut rebuilt: Vec<String> = Vec::with_capacity(n);
    let mut changed = false;
    for (i, line) in split.lines.iter().enumerate() {
        let is_variable_line = split.in_code[i]
            && !line.starts_with(char::is_whitespace)
            && (line.trim_start().starts_with("variable ") || line.trim() == "variable");
        if !is_variable_line {
            rebuilt.push((*line).to_string());
            continue;
        }
        let rest = line.trim_start().trim_start_matches("variable").trim_start();
        let Some(groups) = parse_binder_groups(rest) else {
            rebuilt.push((*line).to_string());
            continue;
        };
        let after_lines: String = split.lines[i + 1..].join("\n");
        let kept: Vec<&BinderGroup> = groups
            .iter()
            .enumerate()
            .filter(|(gi, g)| {
                if g.names.is_empty() {
                    return true;
                }
                // usage may be in a later binder group on the same line
                let same_line: String = groups[gi + 1..]
                    .iter()
                    .map(|h| h.text.as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                g.names
                    .iter()
                    .any(|name| occurs_as_token(&after_lines, name) || occurs_as_token(&same_line, name))
            })
            .map(|(_, g)| g)
            .collect();
        if kept.len() == groups.len() {
            rebuilt.push((*line).to_string());
        } else {
            changed = true;
            if !kept.is_empty() {
                let texts: Vec<&str> = kept.iter().map(|g| g.text.as_str()).collect();
                rebuilt.push(format!("variable {}", texts.join(" ")));
            }
            // a fully unused line is dropped
        }
    }
    if !changed {
        return src.to_string();
    }
    let refs: Vec<&str> = rebuilt.iter().map(|s| s.as_str()).collect();
    join(refs, split.trailing_newline)
}

fn ensure_section_end(src: &str) -> String {
    let split = split(src);
    let mut stack: Vec<&str> = Vec::new();
    for (line, in_code) in split.lines.iter().zip(&split.in_code) {
        if !in_code || line.starts_with(char::is_whitespace) {
            continue;
        }
        if let Some(name) = section_open_name(line) {
            stack.push(name);
        } else if let Some(name) = section_close_name(line) {
            if stack.last() == Some(&name) {
                stack.pop();
            }
        }
    }
    if stack.is_empty() {
        return src.to_string();
    }
    let mut out = src.to_string();
    if !out.is_empty() && !out.ends_with('\n') {
        out.push('\n');
    }
    for name in stack.iter().rev() {
        if name.is_empty() {
            out.push_str("end\n");
        } else {
            out.push_str(&format!("end {name}\n"));
        }
    }
    if !src.ends_with('\n') {
        // keep the no-trailing-newline shape of the input
        out.pop();
    }
    out
}
