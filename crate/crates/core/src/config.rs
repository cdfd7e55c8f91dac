//! Run configuration: a single TOML file, with credentials coming from the
//! environment only.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{Checker, MockChecker, RealChecker};
use crate::gateway::{
    Backend, GenParams, LiveBackend, PromptLibrary, ReplayBackend, ScriptedBackend,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Live,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckerMode {
    Real,
    Mock,
}

/// Retry/step budgets. Defaults match the shipped hyperparameter set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub backbone_attempts: u32,
    pub proof_attempts: u32,
    pub correction_steps: u32,
    pub final_fix_attempts: u32,
    pub retrieval_k: usize,
    pub checker_timeout_secs: u64,
    /// Wall-clock limit for a single completion request.
    pub gateway_timeout_secs: u64,
    pub mv_rounds: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            backbone_attempts: 3,
            proof_attempts: 3,
            correction_steps: 3,
            final_fix_attempts: 2,
            retrieval_k: 3,
            checker_timeout_secs: 300,
            gateway_timeout_secs: 600,
            mv_rounds: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub templates_dir: PathBuf,
    pub examples_dir: PathBuf,
    /// Optional prompt override directory; builtin prompts otherwise.
    pub prompts_dir: Option<PathBuf>,
    pub kb_path: PathBuf,
    pub run_dir: PathBuf,
    pub backend: BackendMode,
    /// Fixture file for the scripted backend (JSON Lines of script rules).
    pub scripted_path: Option<PathBuf>,
    /// Transcript store for the replay backend.
    pub replay_path: Option<PathBuf>,
    pub checker: CheckerMode,
    /// Fixture directory for the mock checker.
    pub mock_fixtures: Option<PathBuf>,
    /// Lean workspace for the real checker.
    pub lean_workspace: Option<PathBuf>,
    /// Real checker command, target file appended.
    pub checker_command: Vec<String>,
    pub workers: usize,
    pub gen: GenParams,
    pub limits: Limits,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("assets/manifest.jsonl"),
            templates_dir: PathBuf::from("assets/templates"),
            examples_dir: PathBuf::from("assets/examples"),
            prompts_dir: None,
            kb_path: PathBuf::from("kb.jsonl"),
            run_dir: PathBuf::from("runs/out"),
            backend: BackendMode::Scripted,
            scripted_path: None,
            replay_path: None,
            checker: CheckerMode::Mock,
            mock_fixtures: None,
            lean_workspace: None,
            checker_command: vec!["lake".into(), "env".into(), "lean".into()],
            workers: 1,
            gen: GenParams::default(),
            limits: Limits::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        // relative paths resolve against the config file's directory
        if let Some(base) = path.parent() {
            for p in [
                &mut config.manifest,
                &mut config.templates_dir,
                &mut config.examples_dir,
                &mut config.kb_path,
                &mut config.run_dir,
            ] {
                if p.is_relative() {
                    *p = base.join(&p);
                }
            }
            for p in [
                &mut config.prompts_dir,
                &mut config.scripted_path,
                &mut config.replay_path,
                &mut config.mock_fixtures,
                &mut config.lean_workspace,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&p);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.gen
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match self.backend {
            BackendMode::Scripted if self.scripted_path.is_none() => {
                return Err(ConfigError::Invalid("scripted backend needs scripted_path".into()))
            }
            BackendMode::Replay if self.replay_path.is_none() => {
                return Err(ConfigError::Invalid("replay backend needs replay_path".into()))
            }
            _ => {}
        }
        match self.checker {
            CheckerMode::Mock if self.mock_fixtures.is_none() => {
                return Err(ConfigError::Invalid("mock checker needs mock_fixtures".into()))
            }
            CheckerMode::Real if self.lean_workspace.is_none() => {
                return Err(ConfigError::Invalid("real checker needs lean_workspace".into()))
            }
            _ => {}
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>, ConfigError> {
        match self.backend {
            BackendMode::Live => {
                let timeout = Duration::from_secs(self.limits.gateway_timeout_secs);
                Ok(Box::new(
                    LiveBackend::from_env(timeout).map_err(|e| ConfigError::Invalid(e.to_string()))?,
                ))
            }
            BackendMode::Replay => {
                let path = self.replay_path.as_ref().expect("validated");
                Ok(Box::new(
                    ReplayBackend::from_file(path).map_err(|e| ConfigError::Invalid(e.to_string()))?,
                ))
            }
            BackendMode::Scripted => {
                let path = self.scripted_path.as_ref().expect("validated");
                Ok(Box::new(
                    ScriptedBackend::from_file(path).map_err(|e| ConfigError::Invalid(e.to_string()))?,
                ))
            }
        }
    }

    pub fn build_checker(&self) -> Result<Checker, ConfigError> {
        match self.checker {
            CheckerMode::Mock => Ok(Checker::Mock(MockChecker::new(
                self.mock_fixtures.clone().expect("validated"),
            ))),
            CheckerMode::Real => {
                let mut real = RealChecker::new(self.lean_workspace.clone().expect("validated"));
                real.command = self.checker_command.clone();
                real.timeout = Duration::from_secs(self.limits.checker_timeout_secs);
                Ok(Checker::Real(real))
            }
        }
    }

    pub fn build_prompts(&self) -> Result<PromptLibrary, ConfigError> {
        match &self.prompts_dir {
            Some(dir) => {
                PromptLibrary::with_overrides(dir).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            None => Ok(PromptLibrary::builtin()),
        }
    }
}
