//! Command-line front end: train pipelines, search length configurations,
//! evaluate checkpoints, plot Pareto fronts, and re-run any recorded manifest.
//!
//! Exit codes are a stable contract: 0 success, 2 input/parse, 3 numeric
//! failure, 4 I/O or corruption.

pub mod plot;

use crate::distill::{self, DistillError, PipelineSpec, TrainingConfig};
use crate::encoder::{EncoderArch, EncoderModel, LengthConfig};
use crate::eval::{cost_flops, evaluate_model, generate_task, SpanTask};
use crate::hpo::{run_search, thread_cap, validate_config, SearchSpace, Strategy, TrialRecord};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numeric(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

fn distill_err(e: DistillError) -> CliError {
    match e {
        DistillError::NumericFailure { .. } => CliError::Numeric(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn default_teacher_seed() -> u64 {
    1
}

fn default_student_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub seed: u64,
    pub num_examples: usize,
    pub seq_len: usize,
    pub vocab: usize,
}

/// Versioned JSON run configuration; unknown fields are rejected outright.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema: u32,
    pub student_arch: EncoderArch,
    /// Defaults to the student architecture (self-distillation setup).
    #[serde(default)]
    pub teacher_arch: Option<EncoderArch>,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Search lattice; derived from the checkpoint and task when absent.
    #[serde(default)]
    pub search: Option<SearchSpace>,
    pub task: TaskSpec,
    #[serde(default = "default_teacher_seed")]
    pub teacher_init_seed: u64,
    #[serde(default = "default_student_seed")]
    pub student_init_seed: u64,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("read config {}: {e}", path.display())))?;
        let cfg: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.schema != 1 {
            return Err(CliError::Input(format!(
                "unsupported config schema {} (expected 1)",
                self.schema
            )));
        }
        self.student_arch
            .validate()
            .map_err(|e| CliError::Input(format!("student_arch: {e}")))?;
        if let Some(t) = &self.teacher_arch {
            t.validate().map_err(|e| CliError::Input(format!("teacher_arch: {e}")))?;
        }
        self.training.validate().map_err(|e| CliError::Input(e.to_string()))?;
        Ok(())
    }

    fn teacher_arch(&self) -> EncoderArch {
        self.teacher_arch.unwrap_or(self.student_arch)
    }
}

/// Everything needed to re-execute a command, recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Invocation {
    Train {
        config: ConfigFile,
        pipeline: Option<String>,
        teacher_pipeline: Option<String>,
        variant: Option<String>,
        teacher_checkpoint: Option<String>,
    },
    Search {
        checkpoint: String,
        task: String,
        strategy: Strategy,
        budget: usize,
        seed: u64,
        space: SearchSpace,
        threads: usize,
    },
    Eval {
        checkpoint: String,
        task: String,
        lengths: Vec<usize>,
        reference_len: Option<usize>,
    },
    Plot {
        csvs: Vec<String>,
        full_f1: Option<f64>,
    },
    Export {
        run: String,
    },
}

impl Invocation {
    fn command(&self) -> &'static str {
        match self {
            Invocation::Train { .. } => "train",
            Invocation::Search { .. } => "search",
            Invocation::Eval { .. } => "eval",
            Invocation::Plot { .. } => "plot",
            Invocation::Export { .. } => "export",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: u32,
    pub command: String,
    pub invocation: Invocation,
    pub seed: u64,
    pub threads: usize,
    pub git_describe: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    /// Artifact file names relative to the run directory (manifest excluded).
    pub outputs: Vec<String>,
}

impl RunManifest {
    /// Creates the run directory and records the manifest before any
    /// computation starts.
    fn begin(
        invocation: Invocation,
        seed: u64,
        outputs: Vec<String>,
        out_dir: &Path,
    ) -> Result<RunManifest, CliError> {
        fs::create_dir_all(out_dir)
            .map_err(|e| CliError::Io(format!("create {}: {e}", out_dir.display())))?;
        let manifest = RunManifest {
            schema: 1,
            command: invocation.command().to_string(),
            invocation,
            seed,
            threads: thread_cap(),
            git_describe: git_describe(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            outputs,
        };
        manifest.write(out_dir)?;
        Ok(manifest)
    }

    fn finish(mut self, out_dir: &Path) -> Result<(), CliError> {
        self.finished_unix_ms = Some(now_ms());
        self.write(out_dir)
    }

    fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_text(&out_dir.join("manifest.json"), &(text + "\n"))
    }

    pub fn load(path: &Path) -> Result<RunManifest, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Io(format!("corrupt manifest {}: {e}", path.display())))
    }
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("write {}: {e}", path.display())))
}

fn canonical(path: &Path) -> String {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf()).display().to_string()
}

fn load_checkpoint(path: &Path) -> Result<EncoderModel, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("read checkpoint {}: {e}", path.display())))?;
    EncoderModel::from_json(&text)
        .map_err(|e| CliError::Io(format!("corrupt checkpoint {}: {e}", path.display())))
}

fn load_task(path: &Path) -> Result<SpanTask, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("read task {}: {e}", path.display())))?;
    SpanTask::from_jsonl(&text)
        .map_err(|e| CliError::Io(format!("corrupt task file {}: {e}", path.display())))
}

pub fn parse_lengths(text: &str) -> Result<Vec<usize>, CliError> {
    text.split('-')
        .map(|f| {
            f.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Input(format!("bad --lengths field {f:?}")))
        })
        .collect()
}

#[derive(Parser)]
#[command(
    name = "lenopt",
    version,
    about = "Length-adaptive encoder training, length-configuration search and reporting"
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Train a distillation pipeline described by a JSON config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Pipeline string such as "ID,20,F -> PD,10,T"
        #[arg(long)]
        pipeline: Option<String>,
        /// Hard-label pipeline for the teacher, run first (FT steps only)
        #[arg(long)]
        teacher_pipeline: Option<String>,
        /// Named pipeline preset: naive, v1, v2, v3 or v4
        #[arg(long)]
        variant: Option<String>,
        /// Warm-start the teacher from a checkpoint instead of a fresh init
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search length configurations for a trained checkpoint
    Search {
        /// Optional config whose search section overrides the derived lattice
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task file, one JSON example per line
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "bayesian")]
        strategy: String,
        #[arg(long, default_value_t = 150)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one length configuration
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Dash-joined per-layer lengths, e.g. 384-300-250-200-150-91
        #[arg(long)]
        lengths: String,
        /// Sequence length of the full-model speedup reference (default: task length)
        #[arg(long)]
        reference_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render Pareto CSVs as an SVG chart plus a markdown summary table
    Plot {
        /// Pareto CSV path (repeat for one polyline per file)
        #[arg(long = "csv", required = true)]
        csvs: Vec<PathBuf>,
        /// Full-model f1 for the reference lines (default: best f1 in the inputs)
        #[arg(long)]
        full_f1: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bundle a run directory (manifest plus text artifacts) into one JSON file
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a recorded manifest into a fresh directory
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(command: CliCommand) -> Result<(), CliError> {
    match command {
        CliCommand::Train { config, pipeline, teacher_pipeline, variant, teacher, out } => {
            let cfg = ConfigFile::load(&config)?;
            match (&pipeline, &variant) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => {
                    return Err(CliError::Input(
                        "pass exactly one of --pipeline or --variant".to_string(),
                    ))
                }
            }
            if variant.is_some() && teacher_pipeline.is_some() {
                return Err(CliError::Input(
                    "--teacher-pipeline cannot be combined with --variant".to_string(),
                ));
            }
            let inv = Invocation::Train {
                config: cfg,
                pipeline,
                teacher_pipeline,
                variant,
                teacher_checkpoint: teacher.as_deref().map(canonical),
            };
            execute_invocation(&inv, &out)
        }
        CliCommand::Search { config, checkpoint, task, strategy, budget, seed, out } => {
            let strategy = Strategy::from_str(&strategy).map_err(|e| CliError::Input(e.to_string()))?;
            let cfg = config.as_deref().map(ConfigFile::load).transpose()?;
            let model = load_checkpoint(&checkpoint)?;
            let task_data = load_task(&task)?;
            let space = resolve_space(cfg.as_ref().and_then(|c| c.search), model.arch(), &task_data)?;
            let inv = Invocation::Search {
                checkpoint: canonical(&checkpoint),
                task: canonical(&task),
                strategy,
                budget,
                seed,
                space,
                threads: thread_cap(),
            };
            execute_invocation(&inv, &out)
        }
        CliCommand::Eval { checkpoint, task, lengths, reference_len, out } => {
            let inv = Invocation::Eval {
                checkpoint: canonical(&checkpoint),
                task: canonical(&task),
                lengths: parse_lengths(&lengths)?,
                reference_len,
            };
            execute_invocation(&inv, &out)
        }
        CliCommand::Plot { csvs, full_f1, out } => {
            let inv = Invocation::Plot {
                csvs: csvs.iter().map(|p| canonical(p)).collect(),
                full_f1,
            };
            execute_invocation(&inv, &out)
        }
        CliCommand::Export { run, out } => {
            let inv = Invocation::Export { run: canonical(&run) };
            execute_invocation(&inv, &out)
        }
        CliCommand::Rerun { manifest, out } => {
            let recorded = RunManifest::load(&manifest)?;
            execute_invocation(&recorded.invocation, &out)
        }
    }
}

/// The search lattice defaults to the checkpoint's layer count over
/// [2, min(max_seq, task length)]; a config's search section overrides it.
fn resolve_space(
    configured: Option<SearchSpace>,
    arch: &EncoderArch,
    task: &SpanTask,
) -> Result<SearchSpace, CliError> {
    let space = configured.unwrap_or(SearchSpace {
        num_vars: arch.num_layers,
        lower: 2.min(arch.max_seq),
        upper: arch.max_seq.min(task.seq_len),
        monotone: true,
    });
    if space.num_vars != arch.num_layers {
        return Err(CliError::Input(format!(
            "search space has {} variables but the checkpoint has {} layers",
            space.num_vars, arch.num_layers
        )));
    }
    if space.upper > arch.max_seq {
        return Err(CliError::Input(format!(
            "search upper bound {} exceeds the checkpoint's max_seq {}",
            space.upper, arch.max_seq
        )));
    }
    if !space.feasible() {
        return Err(CliError::Input(format!(
            "infeasible search space: lower {} upper {}",
            space.lower, space.upper
        )));
    }
    Ok(space)
}

pub fn execute_invocation(inv: &Invocation, out: &Path) -> Result<(), CliError> {
    match inv {
        Invocation::Train { config, pipeline, teacher_pipeline, variant, teacher_checkpoint } => {
            execute_train(
                inv,
                config,
                pipeline.as_deref(),
                teacher_pipeline.as_deref(),
                variant.as_deref(),
                teacher_checkpoint.as_deref(),
                out,
            )
        }
        Invocation::Search { checkpoint, task, strategy, budget, seed, space, threads } => {
            execute_search(inv, checkpoint, task, *strategy, *budget, *seed, space, *threads, out)
        }
        Invocation::Eval { checkpoint, task, lengths, reference_len } => {
            execute_eval(inv, checkpoint, task, lengths, *reference_len, out)
        }
        Invocation::Plot { csvs, full_f1 } => execute_plot(inv, csvs, *full_f1, out),
        Invocation::Export { run } => execute_export(inv, run, out),
    }
}

fn build_pipeline_spec(
    pipeline: Option<&str>,
    teacher_pipeline: Option<&str>,
    variant: Option<&str>,
) -> Result<PipelineSpec, CliError> {
    if let Some(name) = variant {
        return distill::variant(name).map_err(distill_err);
    }
    let text = pipeline.ok_or_else(|| {
        CliError::Input("pass exactly one of --pipeline or --variant".to_string())
    })?;
    let mut spec = distill::parse_pipeline(text).map_err(distill_err)?;
    if let Some(tp) = teacher_pipeline {
        spec.teacher_pipeline = Some(Box::new(distill::parse_pipeline(tp).map_err(distill_err)?));
    }
    Ok(spec)
}

fn execute_train(
    inv: &Invocation,
    config: &ConfigFile,
    pipeline: Option<&str>,
    teacher_pipeline: Option<&str>,
    variant: Option<&str>,
    teacher_checkpoint: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    config.validate()?;
    let spec = build_pipeline_spec(pipeline, teacher_pipeline, variant)?;
    let task = generate_task(
        config.task.seed,
        config.task.num_examples,
        config.task.seq_len,
        config.task.vocab,
    )
    .map_err(|e| CliError::Input(format!("task: {e}")))?;
    let teacher = match teacher_checkpoint {
        Some(p) => load_checkpoint(Path::new(p))?,
        None => EncoderModel::new(config.teacher_arch(), config.teacher_init_seed)
            .map_err(|e| CliError::Input(e.to_string()))?,
    };
    let student = EncoderModel::new(config.student_arch, config.student_init_seed)
        .map_err(|e| CliError::Input(e.to_string()))?;

    let teacher_steps = spec.teacher_pipeline.as_ref().map_or(0, |tp| tp.steps.len());
    let mut outputs =
        vec!["metrics.csv".to_string(), "task.jsonl".to_string(), "student.json".to_string(), "teacher.json".to_string()];
    for i in 1..=teacher_steps {
        outputs.push(format!("teacher_step{i}.json"));
    }
    for i in 1..=spec.steps.len() {
        outputs.push(format!("step{i}.json"));
    }
    let manifest = RunManifest::begin(inv.clone(), config.training.seed, outputs, out)?;

    let run = distill::run_pipeline(&spec, &teacher, &student, &task, &config.training)
        .map_err(distill_err)?;

    write_text(&out.join("metrics.csv"), &metrics_csv(&run.metrics))?;
    write_text(&out.join("task.jsonl"), &task.to_jsonl())?;
    for (label, model) in &run.checkpoints {
        write_text(&out.join(format!("{label}.json")), &model.to_json())?;
    }
    write_text(&out.join("student.json"), &run.student.to_json())?;
    write_text(&out.join("teacher.json"), &run.teacher.to_json())?;
    manifest.finish(out)?;

    let final_f1 = run.metrics.last().map_or(0.0, |r| r.dev_f1);
    println!(
        "train: {} steps, {} epochs, final dev f1 {final_f1:.4}; outputs in {}",
        teacher_steps + spec.steps.len(),
        run.metrics.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn execute_search(
    inv: &Invocation,
    checkpoint: &str,
    task: &str,
    strategy: Strategy,
    budget: usize,
    seed: u64,
    space: &SearchSpace,
    threads: usize,
    out: &Path,
) -> Result<(), CliError> {
    let model = load_checkpoint(Path::new(checkpoint))?;
    let task = load_task(Path::new(task))?;
    if space.num_vars != model.arch().num_layers {
        return Err(CliError::Input(format!(
            "search space has {} variables but the checkpoint has {} layers",
            space.num_vars,
            model.arch().num_layers
        )));
    }
    // the recorded cap is part of the reproducibility contract: batching
    // changes which history each suggestion sees
    std::env::set_var("LENOPT_THREADS", threads.to_string());

    let reference_len = space.upper.min(model.arch().max_seq);
    let full = LengthConfig::full(model.arch().num_layers, reference_len);
    let ref_cost = cost_flops(model.arch(), &full).map_err(|e| CliError::Input(e.to_string()))?;
    evaluate_model(&model, &full, &task)
        .map_err(|e| CliError::Input(format!("cannot evaluate checkpoint on task: {e}")))?;

    let manifest = RunManifest::begin(
        inv.clone(),
        seed,
        vec!["trials.csv".to_string(), "pareto.csv".to_string()],
        out,
    )?;

    let objective = |c: &LengthConfig| match evaluate_model(&model, c, &task) {
        Ok(r) => (r.f1, r.cost_flops),
        Err(_) => (-1.0, f64::MAX),
    };
    let result = run_search(strategy, budget, &objective, space, seed)
        .map_err(|e| CliError::Input(e.to_string()))?;
    if result.trials.iter().any(|t| t.f1 < 0.0) {
        return Err(CliError::Numeric("model evaluation failed during search".to_string()));
    }

    write_text(&out.join("trials.csv"), &trials_csv(&result.trials, space.num_vars, ref_cost))?;
    let mut front: Vec<TrialRecord> = result.archive.points().to_vec();
    front.sort_by(|a, b| {
        (a.cost, a.f1, a.trial_index)
            .partial_cmp(&(b.cost, b.f1, b.trial_index))
            .expect("finite objectives")
    });
    write_text(&out.join("pareto.csv"), &trials_csv(&front, space.num_vars, ref_cost))?;
    manifest.finish(out)?;

    let best_f1 = front.iter().map(|t| t.f1).fold(f64::NEG_INFINITY, f64::max);
    let best_speedup = front.iter().map(|t| ref_cost / t.cost).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "search: {} trials, archive {} points, best f1 {best_f1:.4}, best speedup {best_speedup:.2}",
        result.trials.len(),
        front.len()
    );
    Ok(())
}

fn execute_eval(
    inv: &Invocation,
    checkpoint: &str,
    task: &str,
    lengths: &[usize],
    reference_len: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let model = load_checkpoint(Path::new(checkpoint))?;
    let task = load_task(Path::new(task))?;
    let arch = *model.arch();
    let space = SearchSpace {
        num_vars: arch.num_layers,
        lower: 1,
        upper: arch.max_seq,
        monotone: true,
    };
    let violations = validate_config(&space, lengths);
    if !violations.is_empty() {
        return Err(CliError::Input(format!("invalid --lengths: {}", violations.join("; "))));
    }
    let config =
        LengthConfig::new(lengths.to_vec()).map_err(|e| CliError::Input(e.to_string()))?;

    let manifest = RunManifest::begin(inv.clone(), 0, vec!["eval.csv".to_string()], out)?;

    let result = evaluate_model(&model, &config, &task)
        .map_err(|e| CliError::Input(format!("evaluation failed: {e}")))?;
    let ref_len = reference_len.unwrap_or(task.seq_len).min(arch.max_seq);
    let ref_cost = cost_flops(&arch, &LengthConfig::full(arch.num_layers, ref_len))
        .map_err(|e| CliError::Input(e.to_string()))?;
    let speedup = ref_cost / result.cost_flops;

    let csv_path = out.join("eval.csv");
    let mut csv = if csv_path.exists() {
        fs::read_to_string(&csv_path)
            .map_err(|e| CliError::Io(format!("read {}: {e}", csv_path.display())))?
    } else {
        "lengths,f1,exact_match,cost_flops,speedup\n".to_string()
    };
    let joined =
        lengths.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-");
    let _ = writeln!(
        csv,
        "{joined},{},{},{},{speedup}",
        result.f1, result.exact_match, result.cost_flops
    );
    write_text(&csv_path, &csv)?;
    manifest.finish(out)?;

    println!(
        "eval {joined}: f1 {:.4}, exact_match {:.4}, flops {:.0}, speedup {speedup:.3}",
        result.f1, result.exact_match, result.cost_flops
    );
    Ok(())
}

fn execute_plot(
    inv: &Invocation,
    csvs: &[String],
    full_f1: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let mut series = Vec::new();
    for path in csvs {
        let p = Path::new(path);
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Io(format!("read {}: {e}", p.display())))?;
        let name = p.file_stem().map_or_else(|| path.clone(), |s| s.to_string_lossy().into_owned());
        series.push(plot::parse_pareto_csv(&name, &text).map_err(CliError::Input)?);
    }
    let full = full_f1.unwrap_or_else(|| {
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .fold(f64::NEG_INFINITY, f64::max)
    });

    let manifest = RunManifest::begin(
        inv.clone(),
        0,
        vec!["pareto.svg".to_string(), "summary.md".to_string()],
        out,
    )?;
    write_text(&out.join("pareto.svg"), &plot::render_svg(&series, full))?;
    let table = plot::summary_markdown(&series, full);
    write_text(&out.join("summary.md"), &table)?;
    manifest.finish(out)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct Bundle {
    manifest: serde_json::Value,
    files: BTreeMap<String, String>,
}

fn execute_export(inv: &Invocation, run: &str, out: &Path) -> Result<(), CliError> {
    let run_dir = Path::new(run);
    let manifest_text = fs::read_to_string(run_dir.join("manifest.json"))
        .map_err(|e| CliError::Io(format!("read {}/manifest.json: {e}", run_dir.display())))?;
    let manifest: serde_json::Value = serde_json::from_str(&manifest_text)
        .map_err(|e| CliError::Io(format!("corrupt manifest in {}: {e}", run_dir.display())))?;

    let mut files = BTreeMap::new();
    let entries = fs::read_dir(run_dir)
        .map_err(|e| CliError::Io(format!("read {}: {e}", run_dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Io(e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let keep = ["csv", "svg", "md", "jsonl"]
            .iter()
            .any(|ext| name.ends_with(&format!(".{ext}")));
        if keep {
            let text = fs::read_to_string(entry.path())
                .map_err(|e| CliError::Io(format!("read {name}: {e}")))?;
            files.insert(name, text);
        }
    }

    let our_manifest =
        RunManifest::begin(inv.clone(), 0, vec!["bundle.json".to_string()], out)?;
    let bundle = Bundle { manifest, files };
    let text = serde_json::to_string_pretty(&bundle).expect("bundle serializes");
    write_text(&out.join("bundle.json"), &(text + "\n"))?;
    our_manifest.finish(out)?;
    println!("export: wrote {}", out.join("bundle.json").display());
    Ok(())
}

fn metrics_csv(rows: &[distill::MetricsRow]) -> String {
    let mut s =
        String::from("epoch,step_index,loss_total,loss_id,loss_pd,loss_sandwich,dev_f1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step_index, r.loss_total, r.loss_id, r.loss_pd, r.loss_sandwich, r.dev_f1
        );
    }
    s
}

fn trials_csv(trials: &[TrialRecord], num_vars: usize, ref_cost: f64) -> String {
    let mut s = String::from("trial_index,strategy");
    for i in 0..num_vars {
        let _ = write!(s, ",x{i}");
    }
    s.push_str(",f1,cost_flops,speedup\n");
    for t in trials {
        let _ = write!(s, "{},{}", t.trial_index, t.strategy_tag);
        for l in t.config.lengths() {
            let _ = write!(s, ",{l}");
        }
        let _ = writeln!(s, ",{},{},{}", t.f1, t.cost, ref_cost / t.cost);
    }
    s
}
