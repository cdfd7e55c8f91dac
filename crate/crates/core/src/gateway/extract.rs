//! Pulling Lean source out of model completions.

use super::GatewayError;

/// Extract the Lean source from a completion.
///
/// Takes the last fenced block tagged `lean` or `lean4`; if none is tagged,
/// the last fenced block of any tag; with no fence at all, the whole
/// completion trimmed. Fence markers never appear in the result, and an
/// unterminated fence runs to end of input (truncated completions are common).
pub fn extract_code_block(completion: &str) -> Result<String, GatewayError> {
    if completion.trim().is_empty() {
        return Err(GatewayError::EmptyCompletion);
    }

    let mut blocks: Vec<(String, String)> = Vec::new(); // (tag, content)
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in completion.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            match current.take() {
                Some((tag, content)) => blocks.push((tag, content.join("\n"))),
                None => {
                    let tag = trimmed.trim_start_matches('`').trim().to_lowercase();
                    current = Some((tag, Vec::new()));
                }
            }
            continue;
        }
        if let Some((_, content)) = current.as_mut() {
            content.push(line);
        }
    }
    if let Some((tag, content)) = current.take() {
        blocks.push((tag, content.join("\n")));
    }

    let lean = blocks
        .iter()
        .rev()
        .find(|(tag, _)| tag == "lean" || tag == "lean4");
    let chosen = lean.or_else(|| blocks.last());
    match chosen {
        Some((_, content)) => Ok(content.trim().to_string()),
        None => Ok(completion.trim().to_string()),
    }
}
