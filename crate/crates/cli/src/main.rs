//! Command-line front end for the instar pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use instar_core::config::RunConfig;
use instar_core::driver::{Checker, MockChecker, RealChecker, SourceChecker};
use instar_core::evaluator::{render_table, timing_csv, timing_report, StageDurations};
use instar_core::fixer;
use instar_core::kb::KnowledgeBase;
use instar_core::pipeline::{evaluate_run, load_run_records, Pipeline};
use instar_core::templates::load_manifest;

#[derive(Parser)]
#[command(name = "instar", about = "Template-driven Lean instantiation pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over the manifest problems.
    Run(RunArgs),
    /// Aggregate scores from a run directory into the metric report.
    Evaluate(EvaluateArgs),
    /// Emit the metric table and the stage-timing CSV for a run directory.
    Report(ReportArgs),
    /// Knowledge-base utilities.
    Kb(KbArgs),
    /// Static-fixer utilities.
    Fixer(FixerArgs),
    /// Check a single Lean file and print its parsed diagnostics.
    Check(CheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the run configuration TOML.
    #[arg(long, default_value = "config.toml")]
    config: PathBuf,
    /// Comma-separated problem ids; everything in the manifest otherwise.
    #[arg(long, value_delimiter = ',')]
    problems: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory produced by `run`.
    run_dir: PathBuf,
    /// Manifest the run was made from.
    #[arg(long, default_value = "assets/manifest.jsonl")]
    manifest: PathBuf,
    /// Also judge each final file by majority voting (needs --config for
    /// the judge backend).
    #[arg(long)]
    mv: bool,
    /// Run configuration, used for the judge backend and checker when --mv
    /// is set.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    run_dir: PathBuf,
    #[arg(long, default_value = "assets/manifest.jsonl")]
    manifest: PathBuf,
    /// Where to write the timing CSV.
    #[arg(long)]
    timing_csv: Option<PathBuf>,
}

#[derive(Args)]
struct KbArgs {
    #[command(subcommand)]
    command: KbCommand,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Print the kind histogram.
    Stats {
        #[arg(long, default_value = "kb.jsonl")]
        kb: PathBuf,
    },
    /// Print one entry in full.
    Show {
        id: u64,
        #[arg(long, default_value = "kb.jsonl")]
        kb: PathBuf,
    },
    /// Import seed entries from a directory of .json/.jsonl files.
    Seed {
        dir: PathBuf,
        #[arg(long, default_value = "kb.jsonl")]
        kb: PathBuf,
    },
}

#[derive(Args)]
struct FixerArgs {
    #[command(subcommand)]
    command: FixerCommand,
}

#[derive(Subcommand)]
enum FixerCommand {
    /// List the rewrite rules in application order.
    Rules,
}

#[derive(Args)]
struct CheckArgs {
    /// Lean file to check.
    file: PathBuf,
    /// Lean workspace for the real checker.
    #[arg(long)]
    workspace: Option<PathBuf>,
    /// Fixture directory for the mock checker (used when set).
    #[arg(long)]
    mock: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Report(args) => report(args),
        Command::Kb(args) => kb(args),
        Command::Fixer(args) => fixer_cmd(args),
        Command::Check(args) => check(args),
    }
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let config = RunConfig::from_file(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let pipeline = Pipeline::prepare(config).context("preparing pipeline")?;
    let filter: Option<&[String]> = if args.problems.is_empty() {
        None
    } else {
        Some(&args.problems)
    };
    let records = pipeline.run(filter).context("running pipeline")?;
    if records.is_empty() {
        eprintln!("warning: no problems matched the filter");
        return Ok(ExitCode::SUCCESS);
    }
    let mut failures = 0;
    for record in &records {
        match &record.failed {
            None => {
                let score = record.score.as_ref();
                println!(
                    "{}: {} (calls: {})",
                    record.problem_id,
                    score.map_or("scored".to_string(), |s| format!(
                        "file_success={} defs {}/{} thms {}/{} insts {}/{}",
                        s.file_success, s.def_ok, s.def_total, s.thm_ok, s.thm_total, s.inst_ok, s.inst_total
                    )),
                    record.transcript_ids.len()
                );
                for warning in &record.warnings {
                    println!("  warning: {warning}");
                }
            }
            Some(reason) => {
                failures += 1;
                println!("{}: FAILED ({reason})", record.problem_id);
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} of {} problem(s) failed", records.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let manifest = load_manifest(&args.manifest, &[]).context("loading manifest")?;
    let mut report = evaluate_run(&args.run_dir, &manifest)?;
    if args.mv {
        let config_path = args
            .config
            .as_ref()
            .context("--mv needs --config for the judge backend")?;
        let config = RunConfig::from_file(config_path)?;
        let judge = instar_core::gateway::Gateway::new(
            config.build_backend()?,
            config.build_prompts()?,
            config.gen.clone(),
        );
        let checker = config.build_checker()?;
        for record in load_run_records(&args.run_dir)? {
            let Some(problem) = manifest.get(&record.problem_id) else {
                continue;
            };
            let final_path = args.run_dir.join(&record.problem_id).join("final.lean");
            let Ok(candidate) = std::fs::read_to_string(&final_path) else {
                continue;
            };
            let check = checker.check_source(&candidate)?;
            let mut error_messages = String::new();
            for d in &check.diagnostics {
                error_messages.push_str(&format!("{}:{}:{}: {}\n", d.file, d.line, d.col, d.message));
            }
            if error_messages.is_empty() {
                error_messages.push_str("none");
            }
            match instar_core::evaluator::majority_vote_pooled(
                &judge,
                &problem.description,
                &candidate,
                &error_messages,
                config.limits.mv_rounds,
                config.workers,
            ) {
                Ok(score) => {
                    report.mv_scores.insert(record.problem_id.clone(), score);
                }
                Err(e) => eprintln!("mv {}: {e}", record.problem_id),
            }
        }
    }
    print!("{}", render_table(&report));
    let out = args.run_dir.join("eval_report.json");
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    eprintln!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let manifest = load_manifest(&args.manifest, &[]).context("loading manifest")?;
    let eval = evaluate_run(&args.run_dir, &manifest)?;
    print!("{}", render_table(&eval));
    let records = load_run_records(&args.run_dir)?;
    let durations: Vec<StageDurations> = records.iter().map(|r| r.durations.clone()).collect();
    match timing_report(&durations) {
        Ok(timing) => {
            let csv = timing_csv(&timing);
            let path = args
                .timing_csv
                .unwrap_or_else(|| args.run_dir.join("timing.csv"));
            std::fs::write(&path, &csv)?;
            println!("\nstage timing shares:");
            print!("{csv}");
            eprintln!("wrote {}", path.display());
        }
        Err(e) => eprintln!("timing: {e}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn kb(args: KbArgs) -> Result<ExitCode> {
    match args.command {
        KbCommand::Stats { kb } => {
            let (kb, corrupt) = KnowledgeBase::load(&kb).context("loading kb")?;
            for (kind, count) in kb.kind_histogram() {
                println!("{:<22} {count}", kind.label());
            }
            println!("{:<22} {}", "total", kb.len());
            if !corrupt.is_empty() {
                eprintln!("skipped {} corrupt line(s)", corrupt.len());
            }
        }
        KbCommand::Show { id, kb } => {
            let (kb, _) = KnowledgeBase::load(&kb).context("loading kb")?;
            match kb.get(id) {
                Some(entry) => println!("{}", serde_json::to_string_pretty(entry)?),
                None => bail!("no entry with id {id}"),
            }
        }
        KbCommand::Seed { dir, kb: kb_path } => {
            let (mut kb, _) = KnowledgeBase::open(&kb_path).context("opening kb")?;
            let (added, corrupt) = kb.seed_from_dir(&dir).context("seeding")?;
            println!("seeded {added} entries into {}", kb_path.display());
            if !corrupt.is_empty() {
                eprintln!("skipped {} corrupt line(s)", corrupt.len());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fixer_cmd(args: FixerArgs) -> Result<ExitCode> {
    match args.command {
        FixerCommand::Rules => {
            for (i, rule) in fixer::ruleset().iter().enumerate() {
                println!("{}. {:<18} {}", i + 1, rule.id, rule.description);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn check(args: CheckArgs) -> Result<ExitCode> {
    let src = std::fs::read_to_string(&args.file)
        .with_context(|| format!("reading {}", args.file.display()))?;
    let checker = match (&args.mock, &args.workspace) {
        (Some(fixtures), _) => Checker::Mock(MockChecker::new(fixtures.clone())),
        (None, Some(workspace)) => Checker::Real(RealChecker::new(workspace.clone())),
        (None, None) => bail!("pass --workspace <lean project> or --mock <fixture dir>"),
    };
    let report = checker.check_source(&src)?;
    println!(
        "compiled_ok={} errors={} declarations={}",
        report.compiled_ok,
        report.error_count,
        report.decls.len()
    );
    let mut per_decl: BTreeMap<String, usize> = BTreeMap::new();
    for diag in &report.diagnostics {
        println!(
            "{}:{}:{}: {}: {} [{}]{}",
            diag.file,
            diag.line,
            diag.col,
            match diag.severity {
                instar_core::driver::Severity::Error => "error",
                instar_core::driver::Severity::Warning => "warning",
            },
            diag.message.lines().next().unwrap_or(""),
            diag.kind.label(),
            diag.decl
                .as_ref()
                .map(|d| format!(" @ {d}"))
                .unwrap_or_default()
        );
        if let Some(decl) = &diag.decl {
            *per_decl.entry(decl.clone()).or_insert(0) += 1;
        }
    }
    if report.compiled_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}
