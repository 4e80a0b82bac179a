//! Command-line surface. Exit codes: 0 success, 1 invalid input or run
//! directory, 2 backend failure, 3 interrupted with resumable state on disk.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use distill_core::evaluator::{score_prompt, EvalSettings};
use distill_core::sampling::freeze_eval_subset;
use distill_core::{
    validate_config, DistillEngine, EngineError, EpochRecord, Example, OptimizationResult, PromptCandidate,
    PromptMode, RunConfig, TaskSpec,
};
use serde::Serialize;

use crate::dataset::{load_dataset, DataError};
use crate::gateway::{build_backend, Backend, Gateway, ResponseCache};
use crate::json::{to_canonical_string, write_atomic, write_json};
use crate::report::{build_report, render_text, RunReport};
use crate::run::{
    fingerprint, new_run_id, now_rfc3339, ConfigFile, FewShotBaseline, RunDir, RunError, RunManifest,
    RunSink, RunStatus, CACHE, REPORT_JSON, REPORT_TXT,
};

/// Set by the interrupt handler; runs stop after the epoch in progress.
pub static INTERRUPTED: AtomicBool = AtomicBool::new(false);

/// First Ctrl-C finishes the current epoch and exits 3; a second one exits at once.
pub fn install_interrupt_handler() {
    let _ = ctrlc::set_handler(|| {
        if INTERRUPTED.swap(true, Ordering::SeqCst) {
            std::process::exit(3);
        }
        eprintln!("interrupt received; stopping after the current epoch (press again to abort)");
    });
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Interrupted(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Backend(_) => 2,
            Self::Interrupted(_) => 3,
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Validation(e.to_string())
    }
}

fn engine_error(e: EngineError) -> CliError {
    if e.is_backend() {
        CliError::Backend(e.to_string())
    } else {
        CliError::Validation(e.to_string())
    }
}

/// Knobs that tests and embedders set instead of argv.
#[derive(Clone, Default)]
pub struct Options {
    /// Used instead of the backend named in the config.
    pub backend: Option<Arc<dyn Backend>>,
    /// Stop with exit 3 once this many epochs are persisted.
    pub stop_after_epochs: Option<u32>,
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub result: OptimizationResult,
    pub report: RunReport,
    /// Requests that missed the cache and reached the backend.
    pub backend_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateOutput {
    pub prompt: String,
    pub mode: String,
    pub metric: String,
    pub score: f64,
    pub n_examples: usize,
}

pub fn read_config(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
}

/// Every check that can fail before a run directory exists.
fn preflight(task: &TaskSpec, config: &RunConfig, train: &[Example]) -> Result<(), CliError> {
    let mut problems = validate_config(config, task);
    if config.k_examples > train.len() {
        problems.push(format!(
            "k_examples ({}) exceeds the dataset size ({})",
            config.k_examples,
            train.len()
        ));
    }
    if let Some(n) = config.few_shot_baseline {
        if n + 1 > train.len() {
            problems.push(format!("few_shot_baseline ({n}) needs at least {} examples", n + 1));
        }
    }
    if let Err(e) = freeze_eval_subset(train, config.eval_subset_size, config.seed) {
        problems.push(format!("eval_subset_size: {e}"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(problems.join("\n")))
    }
}

fn backend_for(config: &RunConfig, opts: &Options) -> Result<Arc<dyn Backend>, CliError> {
    match &opts.backend {
        Some(b) => Ok(b.clone()),
        None => build_backend(&config.backend).map_err(CliError::Validation),
    }
}

pub fn optimize(config_path: &Path, data_path: &Path, out_dir: &Path, opts: &Options) -> Result<RunOutcome, CliError> {
    let ConfigFile { task, config } = read_config(config_path)?;
    let problems = validate_config(&config, &task);
    if !problems.is_empty() {
        return Err(CliError::Validation(problems.join("\n")));
    }
    let data = load_dataset(data_path, &task)?;
    preflight(&task, &config, &data.examples)?;
    let backend = backend_for(&config, opts)?;
    let bytes = std::fs::read(data_path)?;
    let manifest = RunManifest {
        run_id: new_run_id(),
        created_at: now_rfc3339(),
        config,
        task,
        status: RunStatus::Running,
        completed_epochs: 0,
        data_path: std::fs::canonicalize(data_path)?.display().to_string(),
        data_fingerprint: fingerprint(&bytes),
        error: None,
    };
    let dir = RunDir::create(out_dir, &manifest)?;
    let _lock = dir.lock()?;
    drive(&dir, manifest, &data.examples, Vec::new(), backend, opts)
}

pub fn resume(run_dir: &Path, opts: &Options) -> Result<RunOutcome, CliError> {
    let dir = RunDir::open(run_dir)?;
    let manifest = dir.read_manifest()?;
    if manifest.status == RunStatus::Completed {
        return Err(CliError::Validation(format!(
            "run {} is already completed; nothing to resume",
            manifest.run_id
        )));
    }
    let _lock = dir.lock()?;
    let completed = dir.read_epochs(manifest.completed_epochs)?;
    let data_path = Path::new(&manifest.data_path);
    let bytes = std::fs::read(data_path)
        .map_err(|e| CliError::Validation(format!("cannot read dataset {}: {e}", data_path.display())))?;
    if fingerprint(&bytes) != manifest.data_fingerprint {
        return Err(CliError::Validation(format!(
            "dataset {} changed since the run started",
            data_path.display()
        )));
    }
    let data = load_dataset(data_path, &manifest.task)?;
    preflight(&manifest.task, &manifest.config, &data.examples)?;
    let backend = backend_for(&manifest.config, opts)?;
    drive(&dir, manifest, &data.examples, completed, backend, opts)
}

fn drive(
    dir: &RunDir,
    mut manifest: RunManifest,
    train: &[Example],
    completed: Vec<EpochRecord>,
    backend: Arc<dyn Backend>,
    opts: &Options,
) -> Result<RunOutcome, CliError> {
    let config = manifest.config.clone();
    let task = manifest.task.clone();
    let cache_dir = config
        .backend
        .cache_dir
        .as_ref()
        .map_or_else(|| dir.path(CACHE), PathBuf::from);
    let gateway = Gateway::new(backend)
        .with_cache(ResponseCache::open(cache_dir)?)
        .with_max_in_flight(config.max_in_flight);
    let engine = DistillEngine::new(&gateway, &task, train, &config).map_err(engine_error)?;

    manifest.status = RunStatus::Running;
    manifest.error = None;
    dir.write_manifest(&manifest)?;

    let outcome = {
        let mut sink = RunSink {
            dir,
            manifest: &mut manifest,
            stop_after: opts.stop_after_epochs,
            interrupted: &INTERRUPTED,
        };
        engine.optimize(completed, &mut sink).and_then(|result| {
            let mut baselines = dir.read_baselines().map_err(|e| EngineError::Sink(e.to_string()))?;
            if let Some(n) = config.few_shot_baseline {
                if baselines.few_shot.map(|f| f.n) != Some(n) {
                    let scored = engine.score_seed_prompt(PromptMode::FewShot(n))?;
                    baselines.few_shot = Some(FewShotBaseline { n, score: scored.score });
                    dir.write_baselines(&baselines).map_err(|e| EngineError::Sink(e.to_string()))?;
                }
            }
            Ok((result, baselines))
        })
    };
    let (result, baselines) = match outcome {
        Ok(v) => v,
        Err(EngineError::Halted(epoch)) => {
            return Err(CliError::Interrupted(format!(
                "stopped after epoch {epoch}; continue with `distill resume {}`",
                dir.root().display()
            )))
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            dir.write_manifest(&manifest)?;
            return Err(engine_error(e));
        }
    };

    manifest.status = RunStatus::Completed;
    dir.write_manifest(&manifest)?;
    let report = build_report(&manifest, &result.epochs, &baselines);
    write_json(&dir.path(REPORT_JSON), &report)?;
    write_atomic(&dir.path(REPORT_TXT), &render_text(std::slice::from_ref(&report)))?;
    Ok(RunOutcome {
        run_dir: dir.root().to_path_buf(),
        result,
        report,
        backend_calls: gateway.backend_calls(),
    })
}

pub fn evaluate(
    config_path: &Path,
    data_path: &Path,
    prompt_path: &Path,
    few_shot: Option<usize>,
    opts: &Options,
) -> Result<EvaluateOutput, CliError> {
    let ConfigFile { task, config } = read_config(config_path)?;
    let problems = validate_config(&config, &task);
    if !problems.is_empty() {
        return Err(CliError::Validation(problems.join("\n")));
    }
    let prompt = std::fs::read_to_string(prompt_path)
        .map_err(|e| CliError::Validation(format!("cannot read prompt {}: {e}", prompt_path.display())))?;
    let prompt = prompt.trim().to_string();
    if prompt.is_empty() {
        return Err(CliError::Validation(format!("prompt file {} is empty", prompt_path.display())));
    }
    let data = load_dataset(data_path, &task)?;
    let eval_set = freeze_eval_subset(&data.examples, config.eval_subset_size, config.seed)
        .map_err(|e| CliError::Validation(format!("eval_subset_size: {e}")))?;
    if let Some(n) = few_shot {
        if n + 1 > data.examples.len() {
            return Err(CliError::Validation(format!("--few-shot {n} needs at least {} examples", n + 1)));
        }
    }
    let mut gateway = Gateway::new(backend_for(&config, opts)?).with_max_in_flight(config.max_in_flight);
    if let Some(cache_dir) = &config.backend.cache_dir {
        gateway = gateway.with_cache(ResponseCache::open(cache_dir)?);
    }
    let mode = few_shot.map_or(PromptMode::ZeroShot, PromptMode::FewShot);
    let (scored, _) = score_prompt(
        &gateway,
        &prompt,
        PromptCandidate::seed("").id(),
        &eval_set,
        &data.examples,
        &task,
        &EvalSettings::from_config(&config),
        mode,
    )
    .map_err(engine_error)?;
    Ok(EvaluateOutput {
        prompt,
        mode: mode.label(),
        metric: task.metric.short_name().to_string(),
        score: scored.score,
        n_examples: eval_set.len(),
    })
}

/// Rebuilds each run's report; files are rewritten only when no other
/// process holds the run lock.
pub fn report(run_dirs: &[PathBuf]) -> Result<String, CliError> {
    let mut reports = Vec::with_capacity(run_dirs.len());
    for path in run_dirs {
        let dir = RunDir::open(path)?;
        let manifest = dir.read_manifest()?;
        let epochs = dir.read_epochs(manifest.completed_epochs)?;
        let report = build_report(&manifest, &epochs, &dir.read_baselines()?);
        if let Ok(_lock) = dir.lock() {
            write_json(&dir.path(REPORT_JSON), &report)?;
            write_atomic(&dir.path(REPORT_TXT), &render_text(std::slice::from_ref(&report)))?;
        }
        reports.push(report);
    }
    Ok(render_text(&reports))
}

#[derive(Parser)]
#[command(name = "distill", version, about = "LLM-driven prompt optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the task's seed prompt and write a run directory under --out.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, hide = true)]
        stop_after_epochs: Option<u32>,
    },
    /// Score one prompt the way the optimizer would and print JSON.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        /// Prepend N training demonstrations to every input.
        #[arg(long, value_name = "N")]
        few_shot: Option<usize>,
    },
    /// Render the results table for one or more run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Continue an interrupted or failed run.
    Resume {
        run_dir: PathBuf,
        #[arg(long, hide = true)]
        stop_after_epochs: Option<u32>,
    },
}

fn print_outcome(o: &RunOutcome, stdout: &mut dyn Write, stderr: &mut dyn Write) -> std::io::Result<()> {
    writeln!(stderr, "run directory: {}", o.run_dir.display())?;
    let best = &o.result.best;
    writeln!(
        stdout,
        "best prompt ({}), {} = {}",
        best.id(),
        o.report.metric.short_name(),
        best.score.unwrap_or(f64::NAN)
    )?;
    writeln!(stdout, "{}", best.text)
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I, opts: &Options, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let quiet = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = if quiet {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return if quiet { 0 } else { 1 };
        }
    };
    let mut opts = opts.clone();
    let result: Result<(), CliError> = match cli.command {
        Command::Optimize {
            config,
            data,
            out,
            stop_after_epochs,
        } => {
            opts.stop_after_epochs = stop_after_epochs.or(opts.stop_after_epochs);
            optimize(&config, &data, &out, &opts).and_then(|o| Ok(print_outcome(&o, stdout, stderr)?))
        }
        Command::Resume {
            run_dir,
            stop_after_epochs,
        } => {
            opts.stop_after_epochs = stop_after_epochs.or(opts.stop_after_epochs);
            resume(&run_dir, &opts).and_then(|o| Ok(print_outcome(&o, stdout, stderr)?))
        }
        Command::Evaluate {
            config,
            data,
            prompt,
            few_shot,
        } => evaluate(&config, &data, &prompt, few_shot, &opts).and_then(|out| {
            let s = to_canonical_string(&out).map_err(|e| CliError::Validation(e.to_string()))?;
            Ok(stdout.write_all(s.as_bytes())?)
        }),
        Command::Report { run_dirs } => report(&run_dirs).and_then(|s| Ok(stdout.write_all(s.as_bytes())?)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let kind = match e {
                CliError::Validation(_) => "error",
                CliError::Backend(_) => "backend error",
                CliError::Interrupted(_) => "interrupted",
            };
            let _ = writeln!(stderr, "{kind}: {e}");
            e.exit_code()
        }
    }
}
