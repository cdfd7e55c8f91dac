//! Scoring and aggregation: per-declaration correctness, file success,
//! SC/PS pooling, judge-based majority voting, and stage-time shares.

use std::collections::BTreeMap;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{CheckReport, DeclCategory, Severity};
use crate::gateway::{bindings, Gateway, GatewayError, MAJORITY_VOTE};
use crate::postprocess::CommentedDecl;
use crate::templates::Manifest;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score references unknown problem '{0}'")]
    MissingProblem(String),
    #[error("majority vote inconclusive: {parsed} of {rounds} rounds parsed")]
    MVInconclusive { parsed: usize, rounds: usize },
    #[error("no stage durations recorded")]
    EmptyRunSet,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Per-file score. A declaration is ok iff it has zero attributed error
/// diagnostics; definitions additionally require no sorry in their body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileScore {
    pub problem_id: String,
    pub def_total: usize,
    pub def_ok: usize,
    pub thm_total: usize,
    pub thm_ok: usize,
    pub inst_total: usize,
    pub inst_ok: usize,
    pub file_success: bool,
    pub proof_obligations: usize,
    pub proofs_complete: usize,
    /// Zero error diagnostics (sorries allowed).
    pub compiled_ok: bool,
    pub line_count: usize,
}

/// Score one checked file. Commented-out declarations from postprocessing
/// count toward their category totals as not-ok.
pub fn score_file(
    problem_id: &str,
    src: &str,
    report: &CheckReport,
    commented: &[CommentedDecl],
) -> FileScore {
    let mut score = FileScore {
        problem_id: problem_id.to_string(),
        def_total: 0,
        def_ok: 0,
        thm_total: 0,
        thm_ok: 0,
        inst_total: 0,
        inst_ok: 0,
        file_success: false,
        proof_obligations: 0,
        proofs_complete: 0,
        compiled_ok: report.error_count == 0,
        line_count: src.lines().count(),
    };
    for span in report.decls.iter().filter(|s| s.category != DeclCategory::Preamble) {
        let errored = report
            .diagnostics
            .iter()
            .any(|d| d.severity == Severity::Error && d.decl.as_deref() == Some(span.name.as_str()));
        let ok = !errored
            && match span.category {
                DeclCategory::Definition => !span.has_sorry,
                _ => true,
            };
        match span.category {
            DeclCategory::Definition => {
                score.def_total += 1;
                score.def_ok += ok as usize;
            }
            DeclCategory::Theorem => {
                score.thm_total += 1;
                score.thm_ok += ok as usize;
            }
            DeclCategory::Instance => {
                score.inst_total += 1;
                score.inst_ok += ok as usize;
            }
            DeclCategory::Preamble => unreachable!(),
        }
        if matches!(span.category, DeclCategory::Theorem | DeclCategory::Instance) && span.body_is_proof {
            score.proof_obligations += 1;
            if score.compiled_ok && !span.has_sorry {
                score.proofs_complete += 1;
            }
        }
    }
    for decl in commented {
        match decl.category {
            DeclCategory::Definition => score.def_total += 1,
            DeclCategory::Theorem => score.thm_total += 1,
            DeclCategory::Instance => score.inst_total += 1,
            DeclCategory::Preamble => {}
        }
    }
    // success needs every category present and fully ok, with a clean check
    score.file_success = score.compiled_ok
        && score.def_total >= 1
        && score.thm_total >= 1
        && score.inst_total >= 1
        && score.def_ok == score.def_total
        && score.thm_ok == score.thm_total
        && score.inst_ok == score.inst_total;
    score
}

/// Aggregated rates for one class (or overall). Rates live in [0, 1];
/// `None` means the denominator was empty (reported as n/a, never 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub files: usize,
    pub def_rate: Option<f64>,
    pub thm_rate: Option<f64>,
    pub inst_rate: Option<f64>,
    pub file_rate: f64,
    pub sc_rate: Option<f64>,
    pub ps_rate: Option<f64>,
    pub dm: f64,
    pub tm: f64,
    pub fl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub overall: ClassMetrics,
    pub mv_scores: BTreeMap<String, f64>,
}

fn rate(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn metrics_for(scores: &[&FileScore]) -> ClassMetrics {
    let files = scores.len();
    let sum = |f: fn(&FileScore) -> usize| scores.iter().map(|s| f(s)).sum::<usize>();
    let successes = scores.iter().filter(|s| s.file_success).count();

    // SC pools declarations over failed files only
    let failed: Vec<&&FileScore> = scores.iter().filter(|s| !s.file_success).collect();
    let sc_num: usize = failed.iter().map(|s| s.def_ok + s.thm_ok + s.inst_ok).sum();
    let sc_den: usize = failed
        .iter()
        .map(|s| s.def_total + s.thm_total + s.inst_total)
        .sum();

    // PS pools proof obligations over files that checked clean
    let clean: Vec<&&FileScore> = scores.iter().filter(|s| s.compiled_ok).collect();
    let ps_num: usize = clean.iter().map(|s| s.proofs_complete).sum();
    let ps_den: usize = clean.iter().map(|s| s.proof_obligations).sum();

    ClassMetrics {
        files,
        def_rate: rate(sum(|s| s.def_ok), sum(|s| s.def_total)),
        thm_rate: rate(sum(|s| s.thm_ok), sum(|s| s.thm_total)),
        inst_rate: rate(sum(|s| s.inst_ok), sum(|s| s.inst_total)),
        file_rate: if files == 0 { 0.0 } else { successes as f64 / files as f64 },
        sc_rate: rate(sc_num, sc_den),
        ps_rate: rate(ps_num, ps_den),
        dm: if files == 0 { 0.0 } else { sum(|s| s.def_total) as f64 / files as f64 },
        tm: if files == 0 { 0.0 } else { sum(|s| s.thm_total) as f64 / files as f64 },
        fl: if files == 0 {
            0.0
        } else {
            scores.iter().map(|s| s.line_count).sum::<usize>() as f64 / files as f64
        },
    }
}

/// Pool file scores into per-class and overall metrics.
pub fn aggregate(scores: &[FileScore], manifest: &Manifest) -> Result<EvalReport, EvalError> {
    let mut by_class: BTreeMap<String, Vec<&FileScore>> = BTreeMap::new();
    for score in scores {
        let problem = manifest
            .get(&score.problem_id)
            .ok_or_else(|| EvalError::MissingProblem(score.problem_id.clone()))?;
        by_class.entry(problem.class_id.clone()).or_default().push(score);
    }
    let per_class = by_class
        .iter()
        .map(|(class, scores)| (class.clone(), metrics_for(scores)))
        .collect();
    let all: Vec<&FileScore> = scores.iter().collect();
    Ok(EvalReport {
        per_class,
        overall: metrics_for(&all),
        mv_scores: BTreeMap::new(),
    })
}

static INT_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"-?\d+").expect("integer regex"));

/// First integer in the completion, accepted only inside [0, 100].
fn parse_vote(completion: &str) -> Option<i64> {
    let m = INT_RE.find(completion)?;
    let value: i64 = m.as_str().parse().ok()?;
    if (0..=100).contains(&value) {
        Some(value)
    } else {
        None
    }
}

/// Judge a candidate with repeated scoring rounds. Unparseable (or
/// out-of-range) rounds are retried once, then dropped; at least half the
/// rounds must parse or the vote is inconclusive. The score is the
/// arithmetic mean of the parsed integers.
pub fn majority_vote(
    judge: &Gateway,
    problem: &str,
    candidate: &str,
    error_messages: &str,
    rounds: usize,
) -> Result<f64, EvalError> {
    majority_vote_pooled(judge, problem, candidate, error_messages, rounds, 1)
}

/// Majority vote with rounds spread over a bounded worker pool. With one
/// worker the rounds run strictly in order, which sequence-scripted judge
/// fixtures rely on.
pub fn majority_vote_pooled(
    judge: &Gateway,
    problem: &str,
    candidate: &str,
    error_messages: &str,
    rounds: usize,
    workers: usize,
) -> Result<f64, EvalError> {
    let prompt = judge.render_prompt(
        MAJORITY_VOTE,
        &bindings([
            ("problem", problem),
            ("candidate", candidate),
            ("error_messages", error_messages),
        ]),
    )?;
    let one_round = |prompt: &str| -> Result<Option<i64>, EvalError> {
        let completion = judge.complete(prompt)?;
        if let Some(v) = parse_vote(&completion) {
            return Ok(Some(v));
        }
        // one retry, then the round is dropped
        let retry = judge.complete(prompt)?;
        Ok(parse_vote(&retry))
    };
    let mut results: Vec<Option<i64>> = Vec::with_capacity(rounds);
    if workers <= 1 {
        for _ in 0..rounds {
            results.push(one_round(&prompt)?);
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Option<i64>, EvalError>>>> =
            (0..rounds).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers.min(rounds) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= rounds {
                        break;
                    }
                    *slots[i].lock().expect("slot lock") = Some(one_round(&prompt));
                });
            }
        });
        for slot in slots {
            {
                let v = slot.into_inner().expect("slot lock").expect("round ran")?;
                results.push(v)
            }
        }
    }
    let parsed: Vec<i64> = results.into_iter().flatten().collect();
    if parsed.len() * 2 < rounds {
        return Err(EvalError::MVInconclusive {
            parsed: parsed.len(),
            rounds,
        });
    }
    Ok(parsed.iter().sum::<i64>() as f64 / parsed.len() as f64)
}

/// Pipeline stages tracked for the timing report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generation,
    BackboneCorrection,
    ProofGeneration,
    ProofCorrection,
    HarmlessFixing,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Generation,
        Stage::BackboneCorrection,
        Stage::ProofGeneration,
        Stage::ProofCorrection,
        Stage::HarmlessFixing,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Stage::Generation => "generation",
            Stage::BackboneCorrection => "backbone_correction",
            Stage::ProofGeneration => "proof_generation",
            Stage::ProofCorrection => "proof_correction",
            Stage::HarmlessFixing => "harmless_fixing",
        }
    }
}

pub type StageDurations = BTreeMap<Stage, f64>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    /// Total seconds per stage.
    pub totals: StageDurations,
    /// Percentage share per stage; sums to 100.
    pub shares: StageDurations,
}

pub fn timing_report(records: &[StageDurations]) -> Result<StageTiming, EvalError> {
    let mut totals: StageDurations = Stage::ALL.iter().map(|s| (*s, 0.0)).collect();
    for record in records {
        for (stage, secs) in record {
            *totals.entry(*stage).or_insert(0.0) += secs;
        }
    }
    let grand: f64 = totals.values().sum();
    if grand <= 0.0 {
        return Err(EvalError::EmptyRunSet);
    }
    let shares = totals.iter().map(|(s, v)| (*s, v / grand * 100.0)).collect();
    Ok(StageTiming { totals, shares })
}

pub fn timing_csv(timing: &StageTiming) -> String {
    let mut out = String::from("stage,total_seconds,share_percent\n");
    for stage in Stage::ALL {
        out.push_str(&format!(
            "{},{:.3},{:.2}\n",
            stage.label(),
            timing.totals.get(&stage).copied().unwrap_or(0.0),
            timing.shares.get(&stage).copied().unwrap_or(0.0),
        ));
    }
    out
}

fn fmt_rate(rate: Option<f64>) -> String {
    match rate {
        Some(r) => format!("{:.2}%", r * 100.0),
        None => "n/a".to_string(),
    }
}

/// Plain-text table mirroring the class/overall metric columns.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7} {:>8}\n",
        "class", "files", "def", "thm", "inst", "file", "SC", "PS", "DM", "TM", "FL"
    ));
    let mut row = |name: &str, m: &ClassMetrics| {
        out.push_str(&format!(
            "{:<10} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7.2} {:>7.2} {:>8.2}\n",
            name,
            m.files,
            fmt_rate(m.def_rate),
            fmt_rate(m.thm_rate),
            fmt_rate(m.inst_rate),
            fmt_rate(Some(m.file_rate)),
            fmt_rate(m.sc_rate),
            fmt_rate(m.ps_rate),
            m.dm,
            m.tm,
            m.fl,
        ));
    };
    for (class, metrics) in &report.per_class {
        row(class, metrics);
    }
    row("overall", &report.overall);
    if !report.mv_scores.is_empty() {
        out.push_str("\nmajority-vote scores:\n");
        for (id, score) in &report.mv_scores {
            out.push_str(&format!("  {id}: {score:.1}\n"));
        }
    }
    out
}
