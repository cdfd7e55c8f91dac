//! Checker invocation and report assembly.
//!
//! Two shipped backends: a real subprocess driver that runs the Lean build
//! tool on a workspace file, and a mock driver that maps the sha256 of the
//! file contents to canned raw diagnostics (`<digest>.txt` in a fixture
//! directory; a missing fixture means the file compiles).

pub mod decls;
pub mod diagnostics;

pub use decls::{
    attribute_diagnostics, index_declarations, proof_body_delimiter, scan_sorries, BodyDelimiter,
    DeclCategory, DeclSpan,
};
pub use diagnostics::{
    normalize_error, parse_diagnostics, parse_diagnostics_report, Diagnostic, ErrorKind,
    ParsedDiagnostics, Severity,
};

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::sha256_hex;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("checker unavailable: {0}")]
    CheckerUnavailable(String),
    #[error("workspace invalid: {0}")]
    WorkspaceInvalid(String),
    #[error("checker timed out after {0:?}")]
    CheckerTimeout(Duration),
}

/// Parsed, attributed result of one checker run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub diagnostics: Vec<Diagnostic>,
    pub decls: Vec<DeclSpan>,
    pub error_count: usize,
    pub compiled_ok: bool,
    pub ignored_lines: usize,
}

impl CheckReport {
    /// Build a report from raw checker output and the source it describes.
    pub fn from_raw(raw: &str, src: &str) -> Self {
        let parsed = parse_diagnostics_report(raw);
        let decls = index_declarations(src);
        let diagnostics = attribute_diagnostics(&parsed.diagnostics, &decls);
        let error_count = diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Error)
            .count();
        CheckReport {
            diagnostics,
            decls,
            error_count,
            compiled_ok: error_count == 0,
            ignored_lines: parsed.ignored_lines,
        }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Error)
    }
}

/// Anything that can check a Lean source text.
pub trait SourceChecker: Send + Sync {
    fn check_source(&self, src: &str) -> Result<CheckReport, CheckError>;
}

/// Default per-file wall clock limit for the real checker.
pub const DEFAULT_CHECK_TIMEOUT: Duration = Duration::from_secs(300);

/// Fixture-backed checker. Deterministic: digest of the source selects the
/// raw output; absent fixture means no diagnostics.
pub struct MockChecker {
    fixtures: PathBuf,
}

impl MockChecker {
    pub fn new(fixtures: impl Into<PathBuf>) -> Self {
        MockChecker {
            fixtures: fixtures.into(),
        }
    }

    /// Path a fixture for `src` would live at. Tests use this to stage
    /// outputs for sources they construct.
    pub fn fixture_path_for(dir: &Path, src: &str) -> PathBuf {
        dir.join(format!("{}.txt", sha256_hex(src.as_bytes())))
    }
}

impl SourceChecker for MockChecker {
    fn check_source(&self, src: &str) -> Result<CheckReport, CheckError> {
        let path = Self::fixture_path_for(&self.fixtures, src);
        let raw = fs::read_to_string(&path).unwrap_or_default();
        Ok(CheckReport::from_raw(&raw, src))
    }
}

/// Subprocess checker: runs the configured command with the target file
/// appended, in the workspace directory, capturing stdout and stderr as the
/// raw diagnostic stream.
pub struct RealChecker {
    pub workspace: PathBuf,
    /// Command and leading args, e.g. `["lake", "env", "lean"]`.
    pub command: Vec<String>,
    pub timeout: Duration,
}

impl RealChecker {
    pub fn new(workspace: impl Into<PathBuf>) -> Self {
        RealChecker {
            workspace: workspace.into(),
            command: vec!["lake".into(), "env".into(), "lean".into()],
            timeout: DEFAULT_CHECK_TIMEOUT,
        }
    }

    pub fn check_file(&self, file: &Path) -> Result<CheckReport, CheckError> {
        if !self.workspace.is_dir() {
            return Err(CheckError::WorkspaceInvalid(
                self.workspace.display().to_string(),
            ));
        }
        let src = fs::read_to_string(file)
            .map_err(|e| CheckError::WorkspaceInvalid(format!("{}: {e}", file.display())))?;
        let raw = self.run_checker(file)?;
        Ok(CheckReport::from_raw(&raw, &src))
    }

    fn run_checker(&self, file: &Path) -> Result<String, CheckError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| CheckError::CheckerUnavailable("empty checker command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .arg(file)
            .current_dir(&self.workspace)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| CheckError::CheckerUnavailable(format!("{program}: {e}")))?;
        wait_with_timeout(&mut child, self.timeout)
    }
}

impl SourceChecker for RealChecker {
    /// Checks an in-memory source by writing a private scratch file into the
    /// workspace, so concurrent invocations never share a target.
    fn check_source(&self, src: &str) -> Result<CheckReport, CheckError> {
        if !self.workspace.is_dir() {
            return Err(CheckError::WorkspaceInvalid(
                self.workspace.display().to_string(),
            ));
        }
        let scratch = self
            .workspace
            .join(format!("Scratch_{}.lean", &sha256_hex(src.as_bytes())[..16]));
        fs::write(&scratch, src)
            .map_err(|e| CheckError::WorkspaceInvalid(format!("{}: {e}", scratch.display())))?;
        let result = self.run_checker(&scratch);
        let _ = fs::remove_file(&scratch);
        Ok(CheckReport::from_raw(&result?, src))
    }
}

fn wait_with_timeout(child: &mut Child, timeout: Duration) -> Result<String, CheckError> {
    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let (tx, rx) = mpsc::channel();
    let reader = thread::spawn(move || {
        let mut out = String::new();
        let _ = stdout.read_to_string(&mut out);
        let mut err = String::new();
        let _ = stderr.read_to_string(&mut err);
        if !err.is_empty() {
            if !out.is_empty() && !out.ends_with('\n') {
                out.push('\n');
            }
            out.push_str(&err);
        }
        let _ = tx.send(out);
    });
    match rx.recv_timeout(timeout) {
        Ok(raw) => {
            let _ = child.wait();
            let _ = reader.join();
            Ok(raw)
        }
        Err(_) => {
            let _ = child.kill();
            let _ = child.wait();
            Err(CheckError::CheckerTimeout(timeout))
        }
    }
}

/// Checker configuration as selected by the pipeline config.
pub enum Checker {
    Real(RealChecker),
    Mock(MockChecker),
}

impl Checker {
    pub fn check(&self, workspace: &Path, file: &Path) -> Result<CheckReport, CheckError> {
        match self {
            Checker::Real(real) => {
                if real.workspace != workspace {
                    let mut custom = RealChecker::new(workspace);
                    custom.command = real.command.clone();
                    custom.timeout = real.timeout;
                    custom.check_file(file)
                } else {
                    real.check_file(file)
                }
            }
            Checker::Mock(mock) => {
                let src = fs::read_to_string(file)
                    .map_err(|e| CheckError::WorkspaceInvalid(format!("{}: {e}", file.display())))?;
                mock.check_source(&src)
            }
        }
    }
}

impl SourceChecker for Checker {
    fn check_source(&self, src: &str) -> Result<CheckReport, CheckError> {
        match self {
            Checker::Real(real) => real.check_source(src),
            Checker::Mock(mock) => mock.check_source(src),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn missing_fixture_means_compiled_ok() {
        let dir = TempDir::new().unwrap();
        let checker = MockChecker::new(dir.path());
        let report = checker.check_source("def a := 1\n").unwrap();
        assert!(report.compiled_ok);
        assert_eq!(report.error_count, 0);
    }

    #[test]
    fn fixture_output_is_parsed_and_attributed() {
        let dir = TempDir::new().unwrap();
        let src = "import Mathlib\n\ntheorem t : True := by\n  exact bad\n";
        let raw = "Main.lean:4:8: error: unknown identifier 'bad'\n";
        fs::write(MockChecker::fixture_path_for(dir.path(), src), raw).unwrap();
        let checker = MockChecker::new(dir.path());
        let report = checker.check_source(src).unwrap();
        assert!(!report.compiled_ok);
        assert_eq!(report.error_count, 1);
        assert_eq!(report.diagnostics[0].line, 4);
        assert_eq!(report.diagnostics[0].col, 8);
        assert_eq!(report.diagnostics[0].decl.as_deref(), Some("t"));
    }

    #[test]
    fn real_checker_runs_a_subprocess() {
        // use `cat` as a stand-in checker: it echoes the file, which parses
        // to zero diagnostics
        let dir = TempDir::new().unwrap();
        let file = dir.path().join("T.lean");
        fs::write(&file, "def a := 1\n").unwrap();
        let mut checker = RealChecker::new(dir.path());
        checker.command = vec!["cat".into()];
        let report = checker.check_file(&file).unwrap();
        assert!(report.compiled_ok);
    }

    #[test]
    fn real_checker_times_out() {
        let dir = TempDir::new().unwrap();
        let file = dir.path().join("T.lean");
        fs::write(&file, "def a := 1\n").unwrap();
        let mut checker = RealChecker::new(dir.path());
        // the target file lands in $0; the shell just sleeps
        checker.command = vec!["sh".into(), "-c".into(), "sleep 5".into()];
        checker.timeout = Duration::from_millis(100);
        assert!(matches!(
            checker.check_file(&file),
            Err(CheckError::CheckerTimeout(_))
        ));
    }

    #[test]
    fn invalid_workspace_reported() {
        let checker = RealChecker::new("/nonexistent/workspace/path");
        assert!(matches!(
            checker.check_source("def a := 1"),
            Err(CheckError::WorkspaceInvalid(_))
        ));
    }
}
