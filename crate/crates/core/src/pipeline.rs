//! End-to-end orchestration: skeleton → backbone repair → proof refinement →
//! harmless fixing → backtranslation → scoring, with stage-granular
//! checkpointing and per-problem failure isolation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::driver::{CheckError, Checker, SourceChecker};
use crate::evaluator::{score_file, EvalError, EvalReport, FileScore, Stage, StageDurations};
use crate::gateway::{Gateway, GatewayError};
use crate::kb::{KbError, KnowledgeBase};
use crate::postprocess::{CommentedDecl, PostprocessError, Postprocessor};
use crate::repair::{refine_proofs, RepairError, Repairer};
use crate::skeleton::{build_skeleton, SkeletonError};
use crate::templates::{
    available_classes, load_example, load_manifest, load_template, Manifest, Template,
    TemplateError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("run dir: {0}")]
    RunDir(String),
    #[error("problem stage panicked: {0}")]
    StagePanic(String),
}

/// Provenance of one pipeline run over one problem. Stage outputs double as
/// checkpoints: a stage listed in `stages_done` whose file still exists is
/// never re-run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem_id: String,
    /// Wall-clock seconds per timing stage.
    pub durations: StageDurations,
    pub attempts: BTreeMap<String, u32>,
    pub transcript_ids: Vec<u64>,
    /// Candidate files written under the problem dir, in creation order.
    pub candidates: Vec<String>,
    /// stage name → output file (relative to the problem dir).
    pub stages_done: BTreeMap<String, String>,
    pub score: Option<FileScore>,
    pub commented_out: Vec<CommentedDecl>,
    pub unresolved_sorries: usize,
    pub warnings: Vec<String>,
    /// Error text when the problem failed; other problems are unaffected.
    pub failed: Option<String>,
}

impl RunRecord {
    pub fn path(problem_dir: &Path) -> PathBuf {
        problem_dir.join("record.json")
    }

    pub fn load(problem_dir: &Path) -> Option<RunRecord> {
        let text = fs::read_to_string(Self::path(problem_dir)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, problem_dir: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::RunDir(e.to_string()))?;
        fs::write(Self::path(problem_dir), text)
            .map_err(|e| PipelineError::RunDir(format!("{}: {e}", problem_dir.display())))
    }

    fn stage_output(&self, dir: &Path, stage: &str) -> Option<String> {
        let file = self.stages_done.get(stage)?;
        fs::read_to_string(dir.join(file)).ok()
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    pub gateway: Gateway,
    pub checker: Checker,
    pub kb: Mutex<KnowledgeBase>,
    pub manifest: Manifest,
    templates: BTreeMap<String, Template>,
    examples: BTreeMap<String, String>,
}

impl Pipeline {
    /// Load everything the run needs. Fails fast on config errors, before
    /// any backend call.
    pub fn prepare(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        fs::create_dir_all(&config.run_dir)
            .map_err(|e| ConfigError::Invalid(format!("run dir {}: {e}", config.run_dir.display())))?;
        // a writability probe, since create_dir_all succeeds on read-only dirs
        let probe = config.run_dir.join(".write_probe");
        fs::write(&probe, b"ok")
            .map_err(|e| ConfigError::Invalid(format!("run dir not writable: {e}")))?;
        let _ = fs::remove_file(&probe);

        let registry = available_classes(&config.templates_dir);
        let manifest = load_manifest(&config.manifest, &registry)?;
        let mut templates = BTreeMap::new();
        let mut examples = BTreeMap::new();
        for problem in &manifest.problems {
            if !templates.contains_key(&problem.template_ref) {
                templates.insert(
                    problem.template_ref.clone(),
                    load_template(&config.templates_dir, &problem.template_ref)?,
                );
            }
            if !examples.contains_key(&problem.example_ref) {
                examples.insert(
                    problem.example_ref.clone(),
                    load_example(&config.examples_dir, &problem.example_ref)?,
                );
            }
        }
        let backend = config.build_backend()?;
        let prompts = config.build_prompts()?;
        let gateway = Gateway::new(backend, prompts, config.gen.clone())
            .with_log_file(config.run_dir.join("transcripts.jsonl"))?;
        let checker = config.build_checker()?;
        let (kb, corrupt) = KnowledgeBase::open(&config.kb_path)?;
        if !corrupt.is_empty() {
            eprintln!("kb: skipped {} corrupt line(s)", corrupt.len());
        }
        Ok(Pipeline {
            config,
            gateway,
            checker,
            kb: Mutex::new(kb),
            manifest,
            templates,
            examples,
        })
    }

    /// Run the pipeline over the selected problems. One failing problem
    /// never aborts the batch.
    pub fn run(&self, filter: Option<&[String]>) -> Result<Vec<RunRecord>, PipelineError> {
        let selected: Vec<usize> = self
            .manifest
            .problems
            .iter()
            .enumerate()
            .filter(|(_, p)| filter.is_none_or(|ids| ids.contains(&p.id)))
            .map(|(i, _)| i)
            .collect();
        let records: Mutex<BTreeMap<usize, RunRecord>> = Mutex::new(BTreeMap::new());
        let next = AtomicUsize::new(0);
        let worker_count = self.config.workers.max(1).min(selected.len().max(1));

        std::thread::scope(|scope| {
            for _ in 0..worker_count {
                scope.spawn(|| loop {
                    let slot = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&idx) = selected.get(slot) else {
                        break;
                    };
                    let problem = &self.manifest.problems[idx];
                    let record = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                        self.run_problem(idx)
                    })) {
                        Ok(Ok(record)) => record,
                        Ok(Err(e)) => RunRecord {
                            problem_id: problem.id.clone(),
                            failed: Some(e.to_string()),
                            ..RunRecord::default()
                        },
                        Err(panic) => RunRecord {
                            problem_id: problem.id.clone(),
                            failed: Some(format!(
                                "panic: {}",
                                panic
                                    .downcast_ref::<&str>()
                                    .map(|s| s.to_string())
                                    .or_else(|| panic.downcast_ref::<String>().cloned())
                                    .unwrap_or_else(|| "opaque".to_string())
                            )),
                            ..RunRecord::default()
                        },
                    };
                    // persist even failure records so reruns see them
                    let dir = self.problem_dir(&record.problem_id);
                    let _ = fs::create_dir_all(&dir);
                    let _ = record.save(&dir);
                    records.lock().expect("records lock").insert(idx, record);
                });
            }
        });
        Ok(records.into_inner().expect("records lock").into_values().collect())
    }

    fn problem_dir(&self, problem_id: &str) -> PathBuf {
        self.config.run_dir.join(problem_id)
    }

    fn write_candidate(
        &self,
        dir: &Path,
        record: &mut RunRecord,
        name: &str,
        text: &str,
    ) -> Result<(), PipelineError> {
        fs::write(dir.join(name), text)
            .map_err(|e| PipelineError::RunDir(format!("{name}: {e}")))?;
        record.candidates.push(name.to_string());
        Ok(())
    }

    fn run_problem(&self, idx: usize) -> Result<RunRecord, PipelineError> {
        let problem = &self.manifest.problems[idx];
        let template = &self.templates[&problem.template_ref];
        let example = &self.examples[&problem.example_ref];
        let dir = self.problem_dir(&problem.id);
        fs::create_dir_all(&dir).map_err(|e| PipelineError::RunDir(e.to_string()))?;

        let mut record = RunRecord::load(&dir).unwrap_or_default();
        record.problem_id = problem.id.clone();
        record.failed = None;
        let calls_before = self.gateway.transcript_count();

        let repairer = Repairer {
            gateway: &self.gateway,
            checker: &self.checker,
            template: Some(template),
            max_correction_steps: self.config.limits.correction_steps,
            retrieval_k: self.config.limits.retrieval_k,
        };

        // stage 1: skeleton generation
        let skeleton_src = match record.stage_output(&dir, "skeleton") {
            Some(src) => src,
            None => {
                let start = Instant::now();
                let skeleton = build_skeleton(
                    &self.gateway,
                    problem,
                    template,
                    example,
                    self.config.limits.backbone_attempts,
                )?;
                *record.durations.entry(Stage::Generation).or_insert(0.0) +=
                    start.elapsed().as_secs_f64();
                record
                    .attempts
                    .insert("generation".into(), skeleton.generation_attempt);
                let name = format!("skeleton_{}.lean", skeleton.generation_attempt);
                self.write_candidate(&dir, &mut record, &name, &skeleton.source)?;
                record.stages_done.insert("skeleton".into(), name);
                record.save(&dir)?;
                skeleton.source
            }
        };

        // stage 2: backbone correction
        let backbone_src = match record.stage_output(&dir, "backbone") {
            Some(src) => src,
            None => {
                let start = Instant::now();
                let outcome = repairer.repair(&skeleton_src, &self.kb)?;
                *record.durations.entry(Stage::BackboneCorrection).or_insert(0.0) +=
                    start.elapsed().as_secs_f64();
                record
                    .attempts
                    .insert("backbone_correction".into(), outcome.iterations_used);
                self.write_candidate(&dir, &mut record, "repair_backbone_0.lean", &outcome.prepared_input)?;
                for (i, candidate) in outcome.candidates.iter().enumerate() {
                    self.write_candidate(
                        &dir,
                        &mut record,
                        &format!("repair_backbone_{}.lean", i + 1),
                        candidate,
                    )?;
                }
                let name = "backbone.lean".to_string();
                fs::write(dir.join(&name), &outcome.final_source)
                    .map_err(|e| PipelineError::RunDir(e.to_string()))?;
                record.stages_done.insert("backbone".into(), name);
                record.save(&dir)?;
                outcome.final_source
            }
        };

        // stage 3: proof refinement
        let proofs_src = match record.stage_output(&dir, "proofs") {
            Some(src) => src,
            None => {
                let outcome = refine_proofs(
                    &repairer,
                    &backbone_src,
                    &self.kb,
                    self.config.limits.proof_attempts,
                )?;
                *record.durations.entry(Stage::ProofGeneration).or_insert(0.0) += outcome.gen_seconds;
                *record.durations.entry(Stage::ProofCorrection).or_insert(0.0) +=
                    outcome.correction_seconds;
                record.attempts.insert("proof_generation".into(), outcome.attempts);
                for (i, candidate) in outcome.attempt_candidates.iter().enumerate() {
                    self.write_candidate(
                        &dir,
                        &mut record,
                        &format!("repair_proof_{}.lean", i + 1),
                        candidate,
                    )?;
                }
                record.unresolved_sorries = outcome.unresolved_sorries;
                let name = "proofs.lean".to_string();
                fs::write(dir.join(&name), &outcome.source)
                    .map_err(|e| PipelineError::RunDir(e.to_string()))?;
                record.stages_done.insert("proofs".into(), name);
                record.save(&dir)?;
                outcome.source
            }
        };

        // stage 4: harmless fixing + backtranslation
        let final_src = match record.stage_output(&dir, "final") {
            Some(src) => src,
            None => {
                let start = Instant::now();
                let post = Postprocessor {
                    gateway: &self.gateway,
                    checker: &self.checker,
                    max_llm_attempts: self.config.limits.final_fix_attempts,
                };
                let (artifact, harmless_report) = post.harmless_fix(&proofs_src)?;
                record.commented_out = artifact.commented_out_decls.clone();
                record
                    .attempts
                    .insert("harmless_fixing".into(), harmless_report.llm_attempts);
                if !artifact.harmless {
                    record.warnings.push(format!(
                        "harmless fixing failed: {} error(s) remain",
                        harmless_report.remaining_errors
                    ));
                }
                for name in &harmless_report.phase1_sorried {
                    record.warnings.push(format!("proof of {name} replaced by sorry"));
                }
                for decl in &harmless_report.phase2_commented {
                    record.warnings.push(format!("declaration {} commented out", decl.name));
                }
                fs::write(dir.join("final.lean"), &artifact.source)
                    .map_err(|e| PipelineError::RunDir(e.to_string()))?;
                let (report_text, warning) = post.backtranslate(&artifact.source)?;
                if let Some(w) = warning {
                    record.warnings.push(w);
                }
                fs::write(dir.join("final_report.md"), &report_text)
                    .map_err(|e| PipelineError::RunDir(e.to_string()))?;
                *record.durations.entry(Stage::HarmlessFixing).or_insert(0.0) +=
                    start.elapsed().as_secs_f64();
                record.stages_done.insert("final".into(), "final.lean".into());
                record.save(&dir)?;
                artifact.source
            }
        };

        // stage 5: scoring
        if record.score.is_none() || !record.stages_done.contains_key("score") {
            let report = self.checker.check_source(&final_src)?;
            record.score = Some(score_file(&problem.id, &final_src, &report, &record.commented_out));
            record.stages_done.insert("score".into(), "record.json".into());
        }

        let calls_after = self.gateway.transcript_count();
        for id in self.gateway.transcripts()[calls_before..calls_after]
            .iter()
            .map(|t| t.request_id)
        {
            record.transcript_ids.push(id);
        }
        record.save(&dir)?;
        Ok(record)
    }
}

/// Collect per-problem records from a run directory.
pub fn load_run_records(run_dir: &Path) -> Result<Vec<RunRecord>, PipelineError> {
    let mut records = Vec::new();
    let entries = fs::read_dir(run_dir)
        .map_err(|e| PipelineError::RunDir(format!("{}: {e}", run_dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        if let Some(record) = RunRecord::load(&dir) {
            records.push(record);
        }
    }
    if records.is_empty() {
        return Err(PipelineError::RunDir(format!(
            "no runs found under {}",
            run_dir.display()
        )));
    }
    Ok(records)
}

/// Aggregate the scores stored in a run directory.
pub fn evaluate_run(run_dir: &Path, manifest: &Manifest) -> Result<EvalReport, PipelineError> {
    let records = load_run_records(run_dir)?;
    let scores: Vec<FileScore> = records.into_iter().filter_map(|r| r.score).collect();
    Ok(crate::evaluator::aggregate(&scores, manifest)?)
}
