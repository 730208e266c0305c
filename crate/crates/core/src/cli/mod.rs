//! Command-line front end. `run` parses arguments, prints the effective
//! configuration, dispatches, and maps outcomes to exit codes:
//! 0 success, 1 partial or runtime failure, 2 usage or configuration error.

pub mod config;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biaslab::report::{run_lab, write_lab, LabOptions};
use crate::dataio::{self, stats, SftRecord};
use crate::pipeline::{run_batch, BatchOptions, RunSummary};
use crate::policy::{fixtures, LogBase, PolicyBackend, RemoteEndpoint, RemotePolicy, ScoringMode, TabularPolicy};
use crate::types::{ConfigError, Method, Question, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_PARTIAL,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "motab", version, about = "Monitored trajectory synthesis for reasoning distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a monitored, backtracked and stitched dataset.
    Synth(RunArgs),
    /// Synthesize a comparison dataset with SKD, ImitKD or plain rollouts.
    Baseline(BaselineArgs),
    /// Run the tabular exposure-bias measurements.
    Biaslab(LabArgs),
    /// Summarize a dataset.
    Stats(StatsArgs),
    /// Check a dataset against the record invariants.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScoringArg {
    Echo,
    Incremental,
    Auto,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogBaseArg {
    E,
    #[value(name = "2")]
    Two,
    #[value(name = "10")]
    Ten,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaselineMethod {
    Skd,
    Imitkd,
    Plain,
}

/// Backend selection. `remote` talks to an OpenAI-compatible completions
/// server; `tabular:<fixture>` or `tabular:@spec.json` uses a table policy.
#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    #[arg(long, value_name = "BACKEND")]
    pub student: Option<String>,
    #[arg(long, value_name = "BACKEND")]
    pub teacher: Option<String>,
    #[arg(long)]
    pub student_url: Option<String>,
    #[arg(long)]
    pub student_model: Option<String>,
    /// Name of the environment variable holding the student's bearer token.
    #[arg(long, value_name = "VAR")]
    pub student_auth_env: Option<String>,
    #[arg(long)]
    pub teacher_url: Option<String>,
    #[arg(long)]
    pub teacher_model: Option<String>,
    /// Name of the environment variable holding the teacher's bearer token.
    #[arg(long, value_name = "VAR")]
    pub teacher_auth_env: Option<String>,
    #[arg(long, value_enum)]
    pub scoring: Option<ScoringArg>,
    #[arg(long, value_enum)]
    pub logprob_base: Option<LogBaseArg>,
    #[arg(long, value_name = "SECS")]
    pub request_timeout: Option<u64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = config::parse_override)]
    pub set: Vec<(String, String)>,
    #[arg(long)]
    pub gamma0: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, short = 'n')]
    pub samples: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short = 'j')]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub max_step_tokens: Option<usize>,
    #[arg(long)]
    pub max_trajectory_tokens: Option<usize>,
    #[arg(long)]
    pub student_temperature: Option<f64>,
    #[arg(long)]
    pub teacher_temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub rev_token: Option<String>,
    #[command(flatten)]
    pub backends: BackendArgs,
    /// JSONL question file.
    #[arg(long, conflicts_with = "demo_questions")]
    pub questions: Option<PathBuf>,
    /// Use N generated questions with text `Q` (for tabular fixtures).
    #[arg(long, value_name = "N")]
    pub demo_questions: Option<usize>,
    #[arg(long, short = 'o')]
    pub output: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Discard existing output, failures and checkpoint.
    #[arg(long)]
    pub fresh_start: bool,
    /// Stop after this many records, dropping in-flight work.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: BaselineMethod,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub mix_p: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct LabArgs {
    #[arg(long, default_value = "biaslab-out")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = crate::biaslab::DEFAULT_MC_SAMPLES)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub coverage_length: usize,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long, short = 'i')]
    pub input: PathBuf,
    /// Also write stats.json and histogram TSVs here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long, short = 'i')]
    pub input: PathBuf,
}

/// Written next to every dataset as `<output>.manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub version: String,
    pub method: Method,
    pub config: RunConfig,
    pub config_fingerprint: String,
    pub seed: u64,
    pub student: String,
    pub teacher: String,
    pub questions: String,
    pub summary: RunSummary,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut p = output.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Synth(a) => synth(Method::Motab, &a, &[]),
        Command::Baseline(b) => {
            let mut extra = Vec::new();
            if let Some(beta) = b.beta {
                extra.push(("skd_beta".to_string(), beta.to_string()));
            }
            if let Some(p) = b.mix_p {
                extra.push(("imitkd_mix_p".to_string(), p.to_string()));
            }
            let m = match b.method {
                BaselineMethod::Skd => Method::Skd,
                BaselineMethod::Imitkd => Method::Imitkd,
                BaselineMethod::Plain => Method::Plain,
            };
            synth(m, &b.run, &extra)
        }
        Command::Biaslab(a) => biaslab(&a),
        Command::Stats(a) => stats_cmd(&a),
        Command::Validate(a) => validate(&a),
    }
}

#[derive(Debug, Clone, Default)]
struct RoleSpec {
    backend: Option<String>,
    url: Option<String>,
    model: Option<String>,
    auth_env: Option<String>,
}

#[derive(Debug, Clone, Default)]
struct EndpointCommon {
    scoring: Option<String>,
    logprob_base: Option<String>,
    timeout: Option<u64>,
    retries: Option<u32>,
}

/// The effective configuration after layering defaults, file, `--set` and flags.
struct Resolved {
    cfg: RunConfig,
    student: RoleSpec,
    teacher: RoleSpec,
    common: EndpointCommon,
}

fn resolve(a: &RunArgs, extra: &[(String, String)]) -> Result<Resolved, CliError> {
    let mut cfg = RunConfig::default();
    let mut r = Resolved { cfg: RunConfig::default(), student: RoleSpec::default(), teacher: RoleSpec::default(), common: EndpointCommon::default() };
    let mut pairs = match &a.config {
        Some(p) => config::read_pairs(p)?,
        None => Vec::new(),
    };
    pairs.extend(a.set.iter().cloned());
    pairs.extend(extra.iter().cloned());
    let num = |k: &str, v: &str| -> Result<u64, CliError> { v.trim().parse().map_err(|_| CliError::Config(format!("`{k}`: cannot parse `{v}`"))) };
    for (k, v) in &pairs {
        match k.as_str() {
            "student_backend" => r.student.backend = Some(v.clone()),
            "student_url" => r.student.url = Some(v.clone()),
            "student_model" => r.student.model = Some(v.clone()),
            "student_auth_env" => r.student.auth_env = Some(v.clone()),
            "teacher_backend" => r.teacher.backend = Some(v.clone()),
            "teacher_url" => r.teacher.url = Some(v.clone()),
            "teacher_model" => r.teacher.model = Some(v.clone()),
            "teacher_auth_env" => r.teacher.auth_env = Some(v.clone()),
            "scoring" => r.common.scoring = Some(v.clone()),
            "logprob_base" => r.common.logprob_base = Some(v.clone()),
            "request_timeout" => r.common.timeout = Some(num(k, v)?),
            "max_retries" => r.common.retries = Some(num(k, v)? as u32),
            k if k.ends_with("auth_token") => {
                return Err(CliError::Config(format!("`{k}`: secrets are read from the environment; use *_auth_env")))
            }
            _ => cfg.set(k, v)?,
        }
    }
    macro_rules! flag {
        ($f:expr, $field:ident) => {
            if let Some(v) = $f.clone() {
                cfg.$field = v;
            }
        };
    }
    flag!(a.gamma0, gamma0);
    flag!(a.alpha, alpha);
    flag!(a.samples, samples_per_question);
    flag!(a.seed, seed);
    flag!(a.concurrency, concurrency_limit);
    flag!(a.max_step_tokens, max_step_tokens);
    flag!(a.max_trajectory_tokens, max_trajectory_tokens);
    flag!(a.student_temperature, student_temperature);
    flag!(a.teacher_temperature, teacher_temperature);
    flag!(a.top_k, entropy_top_k);
    flag!(a.rev_token, rev_token);
    cfg.validate()?;
    r.cfg = cfg;

    let b = &a.backends;
    let over = |dst: &mut Option<String>, src: &Option<String>| {
        if src.is_some() {
            dst.clone_from(src);
        }
    };
    over(&mut r.student.backend, &b.student);
    over(&mut r.student.url, &b.student_url);
    over(&mut r.student.model, &b.student_model);
    over(&mut r.student.auth_env, &b.student_auth_env);
    over(&mut r.teacher.backend, &b.teacher);
    over(&mut r.teacher.url, &b.teacher_url);
    over(&mut r.teacher.model, &b.teacher_model);
    over(&mut r.teacher.auth_env, &b.teacher_auth_env);
    if let Some(s) = b.scoring {
        r.common.scoring = Some(format!("{s:?}").to_lowercase());
    }
    if let Some(l) = b.logprob_base {
        r.common.logprob_base = Some(match l {
            LogBaseArg::E => "e",
            LogBaseArg::Two => "2",
            LogBaseArg::Ten => "10",
        }
        .into());
    }
    r.common.timeout = b.request_timeout.or(r.common.timeout);
    r.common.retries = b.max_retries.or(r.common.retries);
    Ok(r)
}

fn describe(role: &str, spec: &RoleSpec) -> String {
    match spec.backend.as_deref() {
        Some("remote") => {
            let auth = match &spec.auth_env {
                Some(var) if std::env::var_os(var).is_some() => format!("${var} (set, redacted)"),
                Some(var) => format!("${var} (unset)"),
                None => "none".into(),
            };
            format!(
                "remote url={} model={} auth={auth}",
                spec.url.as_deref().unwrap_or("<missing>"),
                spec.model.as_deref().unwrap_or("<missing>")
            )
        }
        Some(other) => other.to_string(),
        None => format!("<no {role} backend>"),
    }
}

fn build_backend(role: &str, spec: &RoleSpec, common: &EndpointCommon) -> Result<Arc<dyn PolicyBackend>, CliError> {
    let kind = spec.backend.as_deref().ok_or_else(|| CliError::Config(format!("no {role} backend (use --{role})")))?;
    if let Some(name) = kind.strip_prefix("tabular:") {
        let policy = if let Some(path) = name.strip_prefix('@') {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
            TabularPolicy::from_json(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))?
        } else {
            fixtures::by_name(name).ok_or_else(|| {
                CliError::Config(format!("unknown fixture `{name}` (known: {})", fixtures::NAMES.join(", ")))
            })?
        };
        return Ok(Arc::new(policy));
    }
    if kind != "remote" {
        return Err(CliError::Config(format!("{role} backend `{kind}`: expected remote or tabular:<name>")));
    }
    let url = spec.url.clone().ok_or_else(|| CliError::Config(format!("remote {role} needs --{role}-url")))?;
    let model = spec.model.clone().ok_or_else(|| CliError::Config(format!("remote {role} needs --{role}-model")))?;
    let mut ep = RemoteEndpoint::new(url, model);
    if let Some(var) = &spec.auth_env {
        let token = std::env::var(var).map_err(|_| CliError::Config(format!("environment variable {var} is not set")))?;
        ep.auth_token = Some(token);
    }
    if let Some(t) = common.timeout {
        ep.request_timeout = Duration::from_secs(t);
    }
    if let Some(n) = common.retries {
        ep.max_retries = n;
    }
    let scoring = match common.scoring.as_deref() {
        None | Some("auto") => ScoringMode::Auto,
        Some("echo") => ScoringMode::Echo,
        Some("incremental") => ScoringMode::Incremental,
        Some(o) => return Err(CliError::Config(format!("scoring `{o}`: expected echo, incremental or auto"))),
    };
    let base = match common.logprob_base.as_deref() {
        None | Some("e") => LogBase::Natural,
        Some("2") => LogBase::Two,
        Some("10") => LogBase::Ten,
        Some(o) => return Err(CliError::Config(format!("logprob_base `{o}`: expected e, 2 or 10"))),
    };
    let p = RemotePolicy::new(ep).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Arc::new(p.with_scoring(scoring).with_log_base(base)))
}

/// `key = value` lines for the effective configuration; strings are shown escaped.
pub fn render_config(cfg: &RunConfig) -> String {
    let mut o = String::new();
    if let Ok(serde_json::Value::Object(m)) = serde_json::to_value(cfg) {
        for (k, v) in m {
            let _ = writeln!(o, "  {k} = {v}");
        }
    }
    o
}

fn load_questions(a: &RunArgs) -> Result<(Vec<Question>, String), CliError> {
    match (&a.questions, a.demo_questions) {
        (Some(p), _) => {
            let qs = dataio::read_questions(p).map_err(|e| CliError::Config(e.to_string()))?;
            Ok((qs, p.display().to_string()))
        }
        (None, Some(n)) => Ok(((0..n).map(|i| Question::new(format!("demo{i:04}"), "Q")).collect(), format!("demo:{n}"))),
        (None, None) => Err(CliError::Config("no questions (use --questions or --demo-questions)".into())),
    }
}

fn synth(method: Method, a: &RunArgs, extra: &[(String, String)]) -> Result<i32, CliError> {
    let r = resolve(a, extra)?;
    let (student_desc, teacher_desc) = (describe("student", &r.student), describe("teacher", &r.teacher));
    eprintln!("effective configuration ({method}):");
    eprint!("{}", render_config(&r.cfg));
    eprintln!("  student = {student_desc}");
    eprintln!("  teacher = {teacher_desc}");
    let student = build_backend("student", &r.student, &r.common)?;
    let teacher = build_backend("teacher", &r.teacher, &r.common)?;
    let (questions, source) = load_questions(a)?;

    let mut opts = BatchOptions::new(method, &a.output);
    if let Some(c) = &a.checkpoint {
        opts.checkpoint = c.clone();
    }
    opts.fresh_start = a.fresh_start;
    opts.stop_after = a.stop_after;
    let summary = run_batch(student.as_ref(), teacher.as_ref(), &questions, &r.cfg, &opts).map_err(|e| match e {
        crate::pipeline::BatchError::Config(c) => CliError::Config(c.0),
        crate::pipeline::BatchError::Data(d @ dataio::DataError::Checkpoint(_)) => {
            CliError::Config(format!("{d}; rerun with --fresh-start to discard it"))
        }
        other => runtime(other),
    })?;

    let manifest = Manifest {
        artifact: "motab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        method,
        config_fingerprint: r.cfg.fingerprint(),
        seed: r.cfg.seed,
        config: r.cfg,
        student: student_desc,
        teacher: teacher_desc,
        questions: source,
        summary: summary.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    std::fs::write(manifest_path(&a.output), json + "\n").map_err(runtime)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(runtime)?);
    Ok(summary.exit_code())
}

fn biaslab(a: &LabArgs) -> Result<i32, CliError> {
    let opts = LabOptions {
        max_len: a.max_len,
        mc_samples: a.mc_samples,
        seed: a.seed,
        coverage_length: a.coverage_length,
        ..LabOptions::default()
    };
    let s = run_lab(&opts).map_err(runtime)?;
    write_lab(&s, &a.out_dir).map_err(runtime)?;
    let last = |v: &[f64]| v.last().copied().unwrap_or(0.0);
    println!("tv at L={}: exact {:.6}, monte carlo {:.6}", a.max_len, last(&s.absorbing_tv_exact.values), last(&s.absorbing_tv_mc.values));
    for c in &s.coverage {
        println!("coverage gamma0={}: tv {:.6} <= bound {:.6}", c.config.gamma0, c.empirical_tv, c.bound);
    }
    for p in &s.mixture {
        println!("mix_alpha={}: corruption {:.6} inference {:.6}", p.mix_alpha, p.corruption, p.inference);
    }
    for (name, v) in [("delayed", &s.validity_delayed), ("regime", &s.validity_regime)] {
        println!(
            "validity {name}: {} breaches, median entropy at rewind {:?} vs breach {:?}",
            v.breaches, v.median_correction, v.median_breach
        );
    }
    println!("wrote {}", a.out_dir.display());
    Ok(EXIT_OK)
}

fn stats_cmd(a: &StatsArgs) -> Result<i32, CliError> {
    let read = dataio::read_records(&a.input).map_err(runtime)?;
    for w in &read.warnings {
        eprintln!("warning: {w}");
    }
    let s = stats::trajectory_stats(&read.records);
    print!("{}", s.render_text());
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(runtime)?;
        let json = serde_json::to_string_pretty(&s).map_err(runtime)?;
        std::fs::write(dir.join("stats.json"), json + "\n").map_err(runtime)?;
        let tsv = |rows: Vec<(String, usize)>| {
            let mut o = String::from("bin\tcount\n");
            for (k, n) in rows {
                let _ = writeln!(o, "{k}\t{n}");
            }
            o
        };
        let depth = tsv(s.depth_histogram.iter().map(|(k, v)| (k.to_string(), *v)).collect());
        let abs = tsv(s.unsafe_step_histogram.iter().map(|(k, v)| (k.to_string(), *v)).collect());
        let rel = tsv(s.relative_unsafe_histogram.iter().enumerate().map(|(i, v)| (format!("{:.1}", i as f64 / 10.0), *v)).collect());
        for (name, body) in [("depth.tsv", depth), ("unsafe_step.tsv", abs), ("relative_unsafe.tsv", rel)] {
            std::fs::write(dir.join(name), body).map_err(runtime)?;
        }
    }
    Ok(EXIT_OK)
}

fn validate(a: &ValidateArgs) -> Result<i32, CliError> {
    let read = dataio::read_records(&a.input).map_err(runtime)?;
    let manifest: Option<Manifest> =
        std::fs::read_to_string(manifest_path(&a.input)).ok().and_then(|t| serde_json::from_str(&t).ok());
    let (gamma0, top_k) = match &manifest {
        Some(m) => (Some(m.config.gamma0), Some(m.config.entropy_top_k)),
        None => (None, None),
    };
    let mut problems = read.warnings.clone();
    let mut seen = BTreeSet::new();
    for (i, r) in read.records.iter().enumerate() {
        if let Err(e) = r.validate(gamma0, top_k) {
            problems.push(format!("record {} ({}#{}): {e}", i + 1, r.question_id, r.sample_index));
        }
        if !seen.insert(SftRecord::key(r)) {
            problems.push(format!("record {}: duplicate key {}#{} {}", i + 1, r.question_id, r.sample_index, r.method));
        }
    }
    for p in &problems {
        eprintln!("invalid: {p}");
    }
    if problems.is_empty() {
        println!("ok: {} records", read.records.len());
        Ok(EXIT_OK)
    } else {
        println!("{} problems in {} records", problems.len(), read.records.len());
        Ok(EXIT_PARTIAL)
    }
}
