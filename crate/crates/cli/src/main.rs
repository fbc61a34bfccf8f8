use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use gtforge_core::capture::{wrap_compiler, SnapshotLedger, WrapConfig, LEDGER_ENV};
use gtforge_core::config::ProjectConfig;
use gtforge_core::evaluator::{
    normalize_output, partition_reports, read_scores_csv, render_table, score, summarize_scores, write_scores_csv,
    write_summary_csv, write_wins_csv, ClaimScope, RegionMode, ScoreOptions, ScoreRow, ADAPTERS,
};
use gtforge_core::pipeline::{assembler_for, read_gt, run_build, run_check, write_build, PipelineError};

#[derive(Parser)]
#[command(
    name = "gtforge",
    version,
    about = "Disassembly ground truth and disassembler evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ground-truth generation.
    #[command(subcommand)]
    Gt(GtCommand),
    /// Scoring and reporting.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Build capture.
    #[command(subcommand)]
    Capture(CaptureCommand),
}

#[derive(Subcommand)]
enum GtCommand {
    /// Builds ground truth for each config.
    Build(BuildArgs),
    /// Checks a ground-truth file against its reconciled listings.
    Check(CheckArgs),
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// Output path; only with a single config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    gt: PathBuf,
    /// Config supplying `assembler_cmd`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Scores prediction files against one ground-truth file.
    Score(ScoreArgs),
    /// Aggregates score CSVs into summary, wins and table reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long = "pred", required = true)]
    preds: Vec<PathBuf>,
    #[arg(long, default_value = "generic")]
    format: String,
    #[arg(long, default_value = "count")]
    regions: RegionMode,
    /// `functions` scores only claims inside ground-truth functions; `all` scores every claim.
    #[arg(long, default_value = "functions")]
    scope: ClaimScope,
    /// Config supplying `os` and `project`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    os: Option<String>,
    #[arg(long)]
    project: Option<String>,
    /// Binary name for the CSV; defaults to the ground-truth file stem.
    #[arg(long)]
    binary: Option<String>,
    /// Scores CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "scores", required = true)]
    scores: Vec<PathBuf>,
    #[arg(long, default_value = "isa,os,compiler,optflag", value_delimiter = ',')]
    group_by: Vec<String>,
    #[arg(long, default_value = "isa,os", value_delimiter = ',')]
    partition_by: Vec<String>,
    /// Output directory for summary.csv, wins.csv and table.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CaptureCommand {
    /// Writes every ledger version, in order, as `NNNNNN_<path>` files.
    Extract {
        /// Ledger root; defaults to $GTFORGE_LEDGER.
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compiler wrapper: runs $GTFORGE_REAL_CC and snapshots assembly output.
    Wrap {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

/// Failures and their exit codes.
enum Failure {
    /// Exit 1: the inputs were processed and found wanting.
    Findings(String),
    /// Exit 2: bad invocation or configuration.
    Usage(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Io { .. } | PipelineError::IsaMismatch { .. } => {
                Failure::Usage(e.to_string())
            }
            e => Failure::Findings(e.to_string()),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gt(GtCommand::Build(a)) => gt_build(a),
        Command::Gt(GtCommand::Check(a)) => gt_check(a),
        Command::Eval(EvalCommand::Score(a)) => eval_score(a),
        Command::Eval(EvalCommand::Report(a)) => eval_report(a),
        Command::Capture(CaptureCommand::Extract { ledger, out }) => capture_extract(ledger, out),
        Command::Capture(CaptureCommand::Wrap { args }) => return capture_wrap(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Findings(m)) => {
            eprintln!("gtforge: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("gtforge: {m}");
            ExitCode::from(2)
        }
    }
}

fn build_one(config: &Path, out: Option<&Path>) -> Result<String, Failure> {
    let cfg = ProjectConfig::load(config).map_err(usage)?;
    let r = run_build(&cfg)?;
    let out = out.map(Path::to_path_buf).unwrap_or(cfg.output.clone());
    write_build(&r, &out)?;
    for f in &r.findings {
        log::warn!("{}: {f}", out.display());
    }
    let insns = r.gt.instructions().count();
    let optional = r.gt.instructions().filter(|i| i.optional).count();
    let summary = format!(
        "{}: {} functions, {} instructions ({} optional), {} regions, {} patches",
        out.display(),
        r.gt.functions.len(),
        insns,
        optional,
        r.gt.regions().count(),
        r.patches
    );
    if !r.check.ok {
        return Err(Failure::Findings(format!("{summary}\ncheck failed:\n{}", r.check)));
    }
    Ok(summary)
}

fn gt_build(a: BuildArgs) -> Result<(), Failure> {
    if a.out.is_some() && a.configs.len() != 1 {
        return Err(usage("--out needs exactly one --config"));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<String, Failure>>>> = Mutex::new((0..a.configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..a.jobs.clamp(1, a.configs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = a.configs.get(i) else { break };
                let r = build_one(cfg, a.out.as_deref());
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut worst: Option<Failure> = None;
    for (cfg, r) in a.configs.iter().zip(results.into_inner().unwrap()) {
        match r.expect("every config is processed") {
            Ok(line) => println!("{line}"),
            Err(f) => {
                let (msg, usage_err) = match &f {
                    Failure::Usage(m) => (m, true),
                    Failure::Findings(m) => (m, false),
                };
                eprintln!("{}: {msg}", cfg.display());
                if usage_err || worst.is_none() {
                    worst = Some(f);
                }
            }
        }
    }
    match worst {
        None => Ok(()),
        Some(Failure::Usage(_)) => Err(Failure::Usage("build failed".into())),
        Some(Failure::Findings(_)) => Err(Failure::Findings("build failed".into())),
    }
}

fn gt_check(a: CheckArgs) -> Result<(), Failure> {
    let gt = read_gt(&a.gt)?;
    let cmd = match &a.config {
        Some(c) => ProjectConfig::load(c).map_err(usage)?.assembler_cmd,
        None => None,
    };
    let driver = assembler_for(cmd.as_deref(), gt.isa).map_err(usage)?;
    let report = run_check(&a.gt, &driver)?;
    if report.ok {
        println!("{}: ok", a.gt.display());
        Ok(())
    } else {
        print!("{report}");
        Err(Failure::Findings(format!("{}: check failed", a.gt.display())))
    }
}

fn eval_score(a: ScoreArgs) -> Result<(), Failure> {
    if !ADAPTERS.contains(&a.format.as_str()) {
        return Err(usage(format!(
            "unknown format `{}` (expected {})",
            a.format,
            ADAPTERS.join(", ")
        )));
    }
    let gt = read_gt(&a.gt)?;
    let cfg = a
        .config
        .as_deref()
        .map(ProjectConfig::load)
        .transpose()
        .map_err(usage)?;
    let os =
        a.os.or(cfg.as_ref().map(|c| c.os.clone()))
            .unwrap_or_else(|| "linux".into());
    let project = a
        .project
        .or(cfg.as_ref().map(|c| c.project.clone()))
        .unwrap_or_else(|| "unknown".into());
    let binary = a.binary.unwrap_or_else(|| {
        a.gt.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let mut rows = Vec::new();
    for p in &a.preds {
        let raw = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let preds =
            normalize_output(&raw, &a.format).map_err(|e| Failure::Findings(format!("{}: {e}", p.display())))?;
        let opts = ScoreOptions {
            regions: a.regions,
            scope: a.scope,
        };
        let s = score(&gt, &preds, opts).map_err(|e| Failure::Findings(format!("{}: {e}", p.display())))?;
        let tool = if preds.tool == "unknown" {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        } else {
            preds.tool.clone()
        };
        rows.push(ScoreRow {
            tool,
            binary: binary.clone(),
            binary_hash: gt.binary_hash.to_hex(),
            isa: gt.isa.to_string(),
            os: os.clone(),
            compiler: gt.provenance.compiler.clone(),
            optflag: gt.provenance.optflag.clone(),
            project: project.clone(),
            tp: s.tp,
            fp: s.fp,
            fn_: s.fn_,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        });
    }
    let failed = |e: gtforge_core::evaluator::ReportError| Failure::Findings(e.to_string());
    match &a.out {
        Some(path) => {
            let f = fs::File::create(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            write_scores_csv(f, &rows).map_err(failed)
        }
        None => write_scores_csv(std::io::stdout().lock(), &rows).map_err(failed),
    }
}

fn eval_report(a: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for p in &a.scores {
        let f = fs::File::open(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        rows.extend(read_scores_csv(f).map_err(|e| usage(format!("{}: {e}", p.display())))?);
    }
    let group_by: Vec<&str> = a.group_by.iter().map(String::as_str).collect();
    let partition_by: Vec<&str> = a.partition_by.iter().map(String::as_str).collect();
    let to_failure = |e: gtforge_core::evaluator::ReportError| match e {
        gtforge_core::evaluator::ReportError::UnknownDimension(_) => usage(e),
        e => Failure::Findings(e.to_string()),
    };
    let summaries = summarize_scores(&rows, &group_by).map_err(to_failure)?;
    let reports = partition_reports(&rows, &partition_by, &group_by).map_err(to_failure)?;
    fs::create_dir_all(&a.out).map_err(|e| usage(format!("{}: {e}", a.out.display())))?;
    let create = |name: &str| {
        let p = a.out.join(name);
        fs::File::create(&p).map_err(|e| usage(format!("{}: {e}", p.display())))
    };
    write_summary_csv(create("summary.csv")?, &summaries).map_err(to_failure)?;
    write_wins_csv(create("wins.csv")?, &reports).map_err(to_failure)?;
    let table = render_table(&reports);
    create("table.txt")?
        .write_all(table.as_bytes())
        .map_err(|e| usage(format!("table.txt: {e}")))?;
    print!("{table}");
    Ok(())
}

fn capture_extract(ledger: Option<PathBuf>, out: PathBuf) -> Result<(), Failure> {
    let root = match ledger.or_else(|| std::env::var_os(LEDGER_ENV).map(PathBuf::from)) {
        Some(r) => r,
        None => return Err(usage(format!("--ledger or {LEDGER_ENV} is required"))),
    };
    if !root.is_dir() {
        return Err(usage(format!("{}: no such ledger", root.display())));
    }
    let versions = SnapshotLedger::open(&root)
        .and_then(|l| l.extract_chronological())
        .map_err(|e| Failure::Findings(e.to_string()))?;
    fs::create_dir_all(&out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    let mut names: BTreeMap<String, String> = BTreeMap::new();
    for (i, (rel, bytes)) in versions.iter().enumerate() {
        let name = format!("{:06}_{}", i + 1, rel.replace('/', "__"));
        let p = out.join(&name);
        fs::write(&p, bytes).map_err(|e| Failure::Findings(format!("{}: {e}", p.display())))?;
        names.insert(name, rel.clone());
    }
    for (name, rel) in names {
        println!("{name} {rel}");
    }
    Ok(())
}

fn capture_wrap(args: Vec<String>) -> ExitCode {
    let result = WrapConfig::from_env().and_then(|cfg| wrap_compiler(&args, &cfg));
    match result {
        Ok(code) => ExitCode::from(u8::try_from(code).unwrap_or(1)),
        Err(e) => {
            eprintln!("gtforge: {e}");
            ExitCode::from(2)
        }
    }
}
