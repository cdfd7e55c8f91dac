//! Minimal Lean source scanner: classifies every byte as code, comment, or
//! string so that line-oriented passes never touch quoted or commented text.
//!
//! Lean block comments (`/- ... -/`) nest; line comments start with `--`;
//! strings are double-quoted with backslash escapes. This is a lexical
//! approximation, not a Lean parser, which is all the rewrite rules and the
//! declaration indexer need.

/// Classification of a single byte of source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteClass {
    Code,
    LineComment,
    BlockComment,
    Str,
}

/// Per-byte classification of `src`. The result has exactly `src.len()` entries.
pub fn classify(src: &str) -> Vec<ByteClass> {
    let bytes = src.as_bytes();
    let mut out = vec![ByteClass::Code; bytes.len()];
    let mut i = 0;
    let mut depth = 0usize; // block comment nesting
    let mut state = State::Code;

    while i < bytes.len() {
        match state {
            State::Code => {
                if bytes[i] == b'-' && i + 1 < bytes.len() && bytes[i + 1] == b'-' {
                    state = State::Line;
                    out[i] = ByteClass::LineComment;
                    out[i + 1] = ByteClass::LineComment;
                    i += 2;
                } else if bytes[i] == b'/' && i + 1 < bytes.len() && bytes[i + 1] == b'-' {
                    state = State::Block;
                    depth = 1;
                    out[i] = ByteClass::BlockComment;
                    out[i + 1] = ByteClass::BlockComment;
                    i += 2;
                } else if bytes[i] == b'"' {
                    state = State::Str;
                    out[i] = ByteClass::Str;
                    i += 1;
                } else {
                    i += 1;
                }
            }
            State::Line => {
                if bytes[i] == b'\n' {
                    state = State::Code;
                } else {
                    out[i] = ByteClass::LineComment;
                }
                i += 1;
            }
            State::Block => {
                if bytes[i] == b'/' && i + 1 < bytes.len() && bytes[i + 1] == b'-' {
                    depth += 1;
                    out[i] = ByteClass::BlockComment;
                    out[i + 1] = ByteClass::BlockComment;
                    i += 2;
                } else if bytes[i] == b'-' && i + 1 < bytes.len() && bytes[i + 1] == b'/' {
                    depth -= 1;
                    out[i] = ByteClass::BlockComment;
                    out[i + 1] = ByteClass::BlockComment;
                    i += 2;
                    if depth == 0 {
                        state = State::Code;
                    }
                } else {
                    out[i] = ByteClass::BlockComment;
                    i += 1;
                }
            }
            State::Str => {
                out[i] = ByteClass::Str;
                if bytes[i] == b'\\' && i + 1 < bytes.len() {
                    out[i + 1] = ByteClass::Str;
                    i += 2;
                } else {
                    if bytes[i] == b'"' {
                        state = State::Code;
                    }
                    i += 1;
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
enum State {
    Code,
    Line,
    Block,
    Str,
}

/// Copy of `src` where every non-code byte is replaced by a space.
/// Line structure is preserved (newlines survive masking).
pub fn mask_non_code(src: &str) -> String {
    let classes = classify(src);
    let mut out = String::with_capacity(src.len());
    for (i, ch) in src.char_indices() {
        if ch == '\n' || classes[i] == ByteClass::Code {
            out.push(ch);
        } else {
            // keep one space per byte so byte offsets stay aligned
            for _ in 0..ch.len_utf8() {
                out.push(' ');
            }
        }
    }
    out
}

/// True when the line starting at byte offset `line_start` begins in code
/// state (i.e. is not a continuation of a block comment or string).
pub fn line_starts_in_code(classes: &[ByteClass], line_start: usize) -> bool {
    match classes.get(line_start) {
        Some(ByteClass::Code) | None => true,
        // a line that *opens* a comment still starts in code state; only
        // continuations matter, and those are classified from byte 0
        Some(ByteClass::LineComment) => false,
        Some(ByteClass::BlockComment) | Some(ByteClass::Str) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_comment_masked() {
        let src = "def a := 1 -- sorry\n";
        let masked = mask_non_code(src);
        assert!(!masked.contains("sorry"));
        assert!(masked.contains("def a := 1"));
    }

    #[test]
    fn nested_block_comments() {
        let src = "/- outer /- inner -/ still -/ def x := 2";
        let masked = mask_non_code(src);
        assert!(!masked.contains("outer"));
        assert!(!masked.contains("inner"));
        assert!(!masked.contains("still"));
        assert!(masked.contains("def x := 2"));
    }

    #[test]
    fn string_contents_masked() {
        let src = "example := \"sorry\"";
        let masked = mask_non_code(src);
        assert!(!masked.contains("sorry"));
    }

    #[test]
    fn escaped_quote_stays_in_string() {
        let src = "def s := \"a\\\"b\" def t := 1";
        let masked = mask_non_code(src);
        assert!(masked.contains("def t := 1"));
        assert!(!masked.contains("a\\"));
    }

    #[test]
    fn mask_preserves_length_and_newlines() {
        let src = "a\n-- c\nb\n";
        let masked = mask_non_code(src);
        assert_eq!(masked.len(), src.len());
        assert_eq!(masked.matches('\n').count(), src.matches('\n').count());
    }
}
