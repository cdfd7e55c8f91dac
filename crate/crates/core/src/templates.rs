//! Abstract-structure templates, worked examples and the problem manifest.
//!
//! A template ships as `<class_id>.lean` plus a `<class_id>.roles` sidecar
//! mapping declaration names to their role in the structure. Roles are
//! annotations, not something recoverable from Lean syntax.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{index_declarations, DeclCategory, DeclSpan};

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("missing asset: {0}")]
    MissingAsset(String),
    #[error("invalid role annotation in {file}: {reason}")]
    RoleAnnotationInvalid { file: String, reason: String },
    #[error("duplicate problem id '{0}'")]
    DuplicateId(String),
    #[error("unknown class '{0}'")]
    UnknownClass(String),
    #[error("manifest schema violation at line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
}

/// Role of a declaration inside an abstract structure: definitions,
/// operations, conditions, and the theorems to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    D,
    O,
    C,
    T,
}

impl Role {
    fn parse(s: &str) -> Option<Role> {
        match s {
            "D" => Some(Role::D),
            "O" => Some(Role::O),
            "C" => Some(Role::C),
            "T" => Some(Role::T),
            _ => None,
        }
    }
}

/// Rule-based snippets lifted from a template's preamble, prepended verbatim
/// to every generated skeleton.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Snippets {
    pub imports: Vec<String>,
    pub opens: Vec<String>,
    pub section_header: Option<String>,
    pub local_notations: Vec<String>,
}

impl Snippets {
    /// All snippet lines in template order.
    pub fn lines(&self) -> Vec<String> {
        let mut out = self.imports.clone();
        out.extend(self.opens.clone());
        if let Some(h) = &self.section_header {
            out.push(h.clone());
        }
        out.extend(self.local_notations.clone());
        out
    }

    fn extract(src: &str, decls: &[DeclSpan]) -> Snippets {
        let lines: Vec<&str> = src.lines().collect();
        let mut snippets = Snippets::default();
        for span in decls.iter().filter(|s| s.category == DeclCategory::Preamble) {
            for line in &lines[span.start_line - 1..span.end_line] {
                let trimmed = line.trim();
                if trimmed.starts_with("import ") {
                    snippets.imports.push(trimmed.to_string());
                } else if trimmed.starts_with("open ") {
                    snippets.opens.push(trimmed.to_string());
                } else if snippets.section_header.is_none()
                    && (trimmed.starts_with("section")
                        || trimmed.starts_with("noncomputable section"))
                {
                    snippets.section_header = Some(trimmed.to_string());
                } else if trimmed.starts_with("local notation") {
                    snippets.local_notations.push(trimmed.to_string());
                }
            }
        }
        snippets
    }
}

/// A formalized abstract structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub class_id: String,
    pub lean_source: String,
    pub snippets: Snippets,
    pub decl_index: Vec<DeclSpan>,
    pub roles: BTreeMap<String, Role>,
}

impl Template {
    /// Names of theorem-category declarations (apply targets for repair
    /// prompts).
    pub fn theorem_names(&self) -> Vec<&str> {
        self.decl_index
            .iter()
            .filter(|s| s.category == DeclCategory::Theorem)
            .map(|s| s.name.as_str())
            .collect()
    }

    /// Full text of a named declaration, if present.
    pub fn decl_text(&self, name: &str) -> Option<String> {
        let lines: Vec<&str> = self.lean_source.lines().collect();
        self.decl_index
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.text(&lines))
    }

    /// Names carrying the theorem role, i.e. the abstract results to
    /// instantiate.
    pub fn t_role_names(&self) -> Vec<&str> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == Role::T)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Load `<class_id>.lean` + `<class_id>.roles` from the templates directory.
pub fn load_template(templates_dir: &Path, class_id: &str) -> Result<Template, TemplateError> {
    let lean_path = templates_dir.join(format!("{class_id}.lean"));
    let roles_path = templates_dir.join(format!("{class_id}.roles"));
    let lean_source = fs::read_to_string(&lean_path)
        .map_err(|_| TemplateError::MissingAsset(lean_path.display().to_string()))?;
    let roles_text = fs::read_to_string(&roles_path)
        .map_err(|_| TemplateError::MissingAsset(roles_path.display().to_string()))?;

    let decl_index = index_declarations(&lean_source);
    let mut roles = BTreeMap::new();
    for (lineno, line) in roles_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, role) = match (parts.next(), parts.next()) {
            (Some(n), Some(r)) => (n, r),
            _ => {
                return Err(TemplateError::RoleAnnotationInvalid {
                    file: roles_path.display().to_string(),
                    reason: format!("line {}: expected '<name> <D|O|C|T>'", lineno + 1),
                })
            }
        };
        let role = Role::parse(role).ok_or_else(|| TemplateError::RoleAnnotationInvalid {
            file: roles_path.display().to_string(),
            reason: format!("line {}: unknown role '{role}'", lineno + 1),
        })?;
        if !decl_index.iter().any(|s| s.name == name) {
            return Err(TemplateError::RoleAnnotationInvalid {
                file: roles_path.display().to_string(),
                reason: format!("role names unknown declaration '{name}'"),
            });
        }
        roles.insert(name.to_string(), role);
    }
    if !roles.values().any(|r| *r == Role::T) {
        return Err(TemplateError::RoleAnnotationInvalid {
            file: roles_path.display().to_string(),
            reason: "no theorem-role (T) declaration".to_string(),
        });
    }
    let snippets = Snippets::extract(&lean_source, &decl_index);
    if snippets.imports.is_empty() {
        return Err(TemplateError::RoleAnnotationInvalid {
            file: lean_path.display().to_string(),
            reason: "template has no import lines".to_string(),
        });
    }
    Ok(Template {
        class_id: class_id.to_string(),
        lean_source,
        snippets,
        decl_index,
        roles,
    })
}

/// Write a template's source and role sidecar back to a templates
/// directory. Loading the written assets reproduces (lean_source, roles).
pub fn write_template(templates_dir: &Path, template: &Template) -> Result<(), TemplateError> {
    fs::create_dir_all(templates_dir)
        .map_err(|e| TemplateError::MissingAsset(format!("{}: {e}", templates_dir.display())))?;
    let lean_path = templates_dir.join(format!("{}.lean", template.class_id));
    fs::write(&lean_path, &template.lean_source)
        .map_err(|e| TemplateError::MissingAsset(format!("{}: {e}", lean_path.display())))?;
    let mut sidecar = String::new();
    for (name, role) in &template.roles {
        let role = match role {
            Role::D => "D",
            Role::O => "O",
            Role::C => "C",
            Role::T => "T",
        };
        sidecar.push_str(&format!("{name} {role}\n"));
    }
    let roles_path = templates_dir.join(format!("{}.roles", template.class_id));
    fs::write(&roles_path, sidecar)
        .map_err(|e| TemplateError::MissingAsset(format!("{}: {e}", roles_path.display())))
}

/// One dataset entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub id: String,
    pub class_id: String,
    pub title: String,
    pub description: String,
    pub objective_latex: String,
    pub template_ref: String,
    pub example_ref: String,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub problems: Vec<ProblemSpec>,
    pub class_counts: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn get(&self, id: &str) -> Option<&ProblemSpec> {
        self.problems.iter().find(|p| p.id == id)
    }
}

/// Load and validate the JSON Lines manifest. `registry` is the set of known
/// class ids (the template directory contents); pass an empty slice to skip
/// the class check.
pub fn load_manifest(path: &Path, registry: &[String]) -> Result<Manifest, TemplateError> {
    let text = fs::read_to_string(path)
        .map_err(|_| TemplateError::MissingAsset(path.display().to_string()))?;
    let mut manifest = Manifest::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let spec: ProblemSpec =
            serde_json::from_str(line).map_err(|e| TemplateError::SchemaViolation {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if spec.description.trim().is_empty() {
            return Err(TemplateError::SchemaViolation {
                line: i + 1,
                reason: "empty description".to_string(),
            });
        }
        if manifest.problems.iter().any(|p| p.id == spec.id) {
            return Err(TemplateError::DuplicateId(spec.id));
        }
        if !registry.is_empty() && !registry.contains(&spec.class_id) {
            return Err(TemplateError::UnknownClass(spec.class_id));
        }
        *manifest.class_counts.entry(spec.class_id.clone()).or_insert(0) += 1;
        manifest.problems.push(spec);
    }
    Ok(manifest)
}

/// Class ids with both a `.lean` and a `.roles` asset in the directory.
pub fn available_classes(templates_dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir(templates_dir) else {
        return out;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("lean") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if templates_dir.join(format!("{stem}.roles")).exists() {
                    out.push(stem.to_string());
                }
            }
        }
    }
    out.sort();
    out
}

/// Load a worked example by reference id from the examples directory.
pub fn load_example(examples_dir: &Path, example_ref: &str) -> Result<String, TemplateError> {
    let path = examples_dir.join(format!("{example_ref}.lean"));
    fs::read_to_string(&path).map_err(|_| TemplateError::MissingAsset(path.display().to_string()))
}

/// Repo-relative default asset locations, resolved against a base directory.
pub struct AssetDirs {
    pub templates: PathBuf,
    pub examples: PathBuf,
    pub manifest: PathBuf,
    pub kb_seed: PathBuf,
}

impl AssetDirs {
    pub fn under(base: &Path) -> Self {
        AssetDirs {
            templates: base.join("templates"),
            examples: base.join("examples"),
            manifest: base.join("manifest.jsonl"),
            kb_seed: base.join("kb_seed"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::TempDir;

    fn assets() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets")
    }

    #[test]
    fn pgm_template_loads_with_expected_roles() {
        let tpl = load_template(&assets().join("templates"), "PGM").unwrap();
        assert_eq!(tpl.roles.get("composite_pro"), Some(&Role::D));
        assert_eq!(tpl.roles.get("pg"), Some(&Role::O));
        assert_eq!(tpl.roles.get("pg_converge"), Some(&Role::T));
        assert_eq!(tpl.snippets.imports.len(), 2);
        assert!(tpl.snippets.section_header.as_deref().unwrap().contains("section PGM"));
        assert!(tpl.decl_text("pg_converge").unwrap().contains("pg_converge"));
    }

    #[test]
    fn all_shipped_templates_load() {
        let dir = assets().join("templates");
        let classes = available_classes(&dir);
        assert_eq!(classes, vec!["ADMM", "BCD", "GD", "Nesterov", "PGM"]);
        for class in &classes {
            let tpl = load_template(&dir, class).unwrap();
            assert!(!tpl.t_role_names().is_empty(), "{class} has no T role");
            assert!(!tpl.snippets.imports.is_empty());
        }
    }

    #[test]
    fn template_without_t_role_is_rejected() {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("X.lean"), "import Mathlib\n\nclass foo\n").unwrap();
        fs::write(dir.path().join("X.roles"), "foo D\n").unwrap();
        let err = load_template(dir.path(), "X").unwrap_err();
        assert!(matches!(err, TemplateError::RoleAnnotationInvalid { .. }));
    }

    #[test]
    fn role_for_unknown_declaration_is_rejected() {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("X.lean"), "import Mathlib\n\ntheorem t : True := by sorry\n").unwrap();
        fs::write(dir.path().join("X.roles"), "ghost T\n").unwrap();
        assert!(load_template(dir.path(), "X").is_err());
    }

    #[test]
    fn missing_asset_reported() {
        let dir = TempDir::new().unwrap();
        assert!(matches!(
            load_template(dir.path(), "PGM"),
            Err(TemplateError::MissingAsset(_))
        ));
    }

    #[test]
    fn shipped_manifest_loads_and_references_resolve() {
        let dirs = AssetDirs::under(&assets());
        let registry = available_classes(&dirs.templates);
        let manifest = load_manifest(&dirs.manifest, &registry).unwrap();
        assert_eq!(manifest.problems.len(), 11);
        let gd: Vec<&str> = manifest
            .problems
            .iter()
            .filter(|p| p.class_id == "GD")
            .map(|p| p.title.as_str())
            .collect();
        assert!(gd.iter().any(|t| t.to_lowercase().contains("logistic regression")));
        let admm: Vec<&str> = manifest
            .problems
            .iter()
            .filter(|p| p.class_id == "ADMM")
            .map(|p| p.title.as_str())
            .collect();
        assert!(admm.iter().any(|t| t.to_lowercase().contains("total variation denoising")));
        // referential integrity: every entry's template and example load
        for p in &manifest.problems {
            load_template(&dirs.templates, &p.template_ref).unwrap();
            load_example(&dirs.examples, &p.example_ref).unwrap();
        }
    }

    #[test]
    fn write_then_load_is_identity_on_source_and_roles() {
        let tpl = load_template(&assets().join("templates"), "PGM").unwrap();
        let dir = TempDir::new().unwrap();
        write_template(dir.path(), &tpl).unwrap();
        let reloaded = load_template(dir.path(), "PGM").unwrap();
        assert_eq!(reloaded.lean_source, tpl.lean_source);
        assert_eq!(reloaded.roles, tpl.roles);
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.jsonl");
        let entry = r#"{"id":"p","class_id":"GD","title":"t","description":"d","objective_latex":"o","template_ref":"GD","example_ref":"e"}"#;
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "{entry}").unwrap();
        writeln!(f, "{entry}").unwrap();
        assert!(matches!(
            load_manifest(&path, &[]),
            Err(TemplateError::DuplicateId(_))
        ));
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        let manifest = load_manifest(&path, &[]).unwrap();
        assert!(manifest.problems.is_empty());
        assert!(manifest.class_counts.is_empty());
    }

    #[test]
    fn unknown_class_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            r#"{"id":"p","class_id":"XaZ","title":"t","description":"d","objective_latex":"o","template_ref":"XaZ","example_ref":"e"}"#,
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path, &["GD".to_string()]),
            Err(TemplateError::UnknownClass(_))
        ));
    }

    #[test]
    fn template_assets_pass_the_fixer_unchanged() {
        // shipped templates and examples must be fixpoints of the rewrite rules
        let dirs = AssetDirs::under(&assets());
        for class in available_classes(&dirs.templates) {
            let src = fs::read_to_string(dirs.templates.join(format!("{class}.lean"))).unwrap();
            let (out, applied) = crate::fixer::apply_rules(&src);
            assert_eq!(out, src, "template {class} not clean: {applied:?}");
        }
        for entry in fs::read_dir(&dirs.examples).unwrap().flatten() {
            let src = fs::read_to_string(entry.path()).unwrap();
            let (out, applied) = crate::fixer::apply_rules(&src);
            assert_eq!(out, src, "example {:?} not clean: {applied:?}", entry.path());
        }
    }
}
