//! Stage 1: build the backbone prompt and produce the formal skeleton with
//! the template's rule-based snippets force-prepended.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{index_declarations, DeclCategory};
use crate::gateway::{bindings, extract_code_block, Gateway, GatewayError, BACKBONE};
use crate::templates::{ProblemSpec, Template};

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("generation exhausted after {0} attempts")]
    GenerationExhausted(u32),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skeleton {
    pub source: String,
    pub problem_id: String,
    pub generation_attempt: u32,
    /// Transcript request id of the completion that produced the source.
    pub provenance: u64,
}

/// Prepend the template snippets and drop completion lines that repeat them
/// (exact match on trimmed text), so imports and opens are never doubled.
pub fn compose_skeleton_source(template: &Template, completion_code: &str) -> String {
    let snippet_lines = template.snippets.lines();
    let snippet_trimmed: Vec<String> =
        snippet_lines.iter().map(|l| l.trim().to_string()).collect();
    let mut out: Vec<String> = snippet_lines;
    out.push(String::new());
    let mut last_blank = true;
    for line in completion_code.lines() {
        if snippet_trimmed.iter().any(|s| s == line.trim()) {
            continue;
        }
        let blank = line.trim().is_empty();
        if blank && last_blank {
            continue; // dedup runs of blanks left by removed lines
        }
        last_blank = blank;
        out.push(line.to_string());
    }
    while out.last().map(|l| l.trim().is_empty()).unwrap_or(false) {
        out.pop();
    }
    let mut src = out.join("\n");
    src.push('\n');
    src
}

fn has_declarations(code: &str) -> bool {
    index_declarations(code)
        .iter()
        .any(|s| s.category != DeclCategory::Preamble)
}

/// Generate the skeleton for one problem. An attempt whose extracted code
/// contains no declaration keyword is discarded and retried.
pub fn build_skeleton(
    gateway: &Gateway,
    problem: &ProblemSpec,
    template: &Template,
    example: &str,
    max_attempts: u32,
) -> Result<Skeleton, SkeletonError> {
    let prompt = gateway.render_prompt(
        BACKBONE,
        &bindings([
            ("problem", problem.description.as_str()),
            ("lean_structure", template.lean_source.as_str()),
            ("lean_example", example),
        ]),
    )?;
    for attempt in 1..=max_attempts {
        let completion = gateway.complete(&prompt)?;
        let provenance = gateway.last_request_id();
        let code = match extract_code_block(&completion) {
            Ok(code) => code,
            Err(GatewayError::EmptyCompletion) => continue,
            Err(e) => return Err(e.into()),
        };
        if !has_declarations(&code) {
            continue;
        }
        return Ok(Skeleton {
            source: compose_skeleton_source(template, &code),
            problem_id: problem.id.clone(),
            generation_attempt: attempt,
            provenance,
        });
    }
    Err(SkeletonError::GenerationExhausted(max_attempts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GenParams, PromptLibrary, ScriptRule, ScriptedBackend};
    use crate::templates::{load_template, Snippets};
    use std::path::Path;

    fn template_with_imports(imports: &[&str]) -> Template {
        Template {
            class_id: "X".into(),
            lean_source: String::new(),
            snippets: Snippets {
                imports: imports.iter().map(|s| s.to_string()).collect(),
                opens: Vec::new(),
                section_header: None,
                local_notations: Vec::new(),
            },
            decl_index: Vec::new(),
            roles: Default::default(),
        }
    }

    fn problem() -> ProblemSpec {
        ProblemSpec {
            id: "p".into(),
            class_id: "X".into(),
            title: "t".into(),
            description: "a problem".into(),
            objective_latex: String::new(),
            template_ref: "X".into(),
            example_ref: "e".into(),
        }
    }

    fn gateway(completions: Vec<&str>) -> Gateway {
        Gateway::new(
            Box::new(ScriptedBackend::new(vec![ScriptRule {
                when_contains: vec!["a problem".into()],
                completions: completions.into_iter().map(String::from).collect(),
            }])),
            PromptLibrary::builtin(),
            GenParams::default(),
        )
    }

    #[test]
    fn snippets_prepended_and_code_kept() {
        let gw = gateway(vec!["```lean4\nclass P where\n```"]);
        let tpl = template_with_imports(&["import Mathlib"]);
        let skeleton = build_skeleton(&gw, &problem(), &tpl, "example", 3).unwrap();
        assert!(skeleton.source.starts_with("import Mathlib\n"));
        assert_eq!(skeleton.source.matches("class P where").count(), 1);
        assert_eq!(skeleton.generation_attempt, 1);
    }

    #[test]
    fn duplicate_import_in_completion_removed() {
        let gw = gateway(vec!["```lean4\nimport Mathlib\nclass P where\n```"]);
        let tpl = template_with_imports(&["import Mathlib"]);
        let skeleton = build_skeleton(&gw, &problem(), &tpl, "example", 3).unwrap();
        assert_eq!(skeleton.source.matches("import Mathlib").count(), 1);
    }

    #[test]
    fn declaration_free_attempt_is_retried() {
        let gw = gateway(vec![
            "no code here at all",
            "```lean4\ndef a := 1\n```",
        ]);
        let tpl = template_with_imports(&["import Mathlib"]);
        let skeleton = build_skeleton(&gw, &problem(), &tpl, "example", 3).unwrap();
        assert_eq!(skeleton.generation_attempt, 2);
        assert!(skeleton.source.contains("def a := 1"));
    }

    #[test]
    fn exhaustion_after_max_attempts() {
        let gw = gateway(vec!["still prose", "more prose", "prose again"]);
        let tpl = template_with_imports(&["import Mathlib"]);
        let err = build_skeleton(&gw, &problem(), &tpl, "example", 3).unwrap_err();
        assert!(matches!(err, SkeletonError::GenerationExhausted(3)));
        assert_eq!(gw.transcript_count(), 3);
    }

    #[test]
    fn building_twice_is_byte_identical() {
        let tpl = template_with_imports(&["import Mathlib", "import Optlib"]);
        let completion = "import Optlib\nclass Q where\n  t : Nat\n";
        let a = compose_skeleton_source(&tpl, completion);
        let b = compose_skeleton_source(&tpl, completion);
        assert_eq!(a, b);
    }

    #[test]
    fn snippet_prefix_invariant_on_shipped_template() {
        let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/templates");
        let tpl = load_template(&assets, "PGM").unwrap();
        let src = compose_skeleton_source(&tpl, "class Lasso_pro where\n  hA : True\n");
        let expected_prefix: String = tpl.snippets.lines().join("\n");
        assert!(src.starts_with(&expected_prefix));
    }
}
