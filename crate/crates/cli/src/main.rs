//! `tb-defect run <config>`: runs one study and writes CSV tables, a JSON
//! summary and a log into the output directory.

mod config;
mod report;
mod study;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;

const THREADS_ENV: &str = "TB_DEFECT_THREADS";

#[derive(Parser)]
#[command(
    name = "tb-defect",
    version,
    about = "Point defects in tight-binding insulators"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the study described by a JSON configuration file.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Override a configuration value by dot path, e.g. `model.t=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; replaces `output` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Falls back to the config, then to TB_DEFECT_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "output error: {m}"),
        }
    }
}

impl From<tbdefect::Error> for CliError {
    fn from(e: tbdefect::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct Summary<'a> {
    tool: &'static str,
    version: &'static str,
    library_version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    threads: usize,
    seconds: f64,
    incomplete: bool,
    error: Option<String>,
    gates: BTreeMap<String, bool>,
    files: Vec<String>,
    results: serde_json::Value,
}

fn resolve(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut doc = config::load(&args.config)?;
    for s in &args.set {
        config::apply_override(&mut doc, s)?;
    }
    let mut cfg = config::parse(doc)?;
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    if cfg.threads.is_none() {
        if let Ok(v) = std::env::var(THREADS_ENV) {
            let n = v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::Validation(format!("{THREADS_ENV}: `{v}` is not a positive integer"))
            })?;
            cfg.threads = Some(n);
        }
    }
    if cfg.threads == Some(0) {
        return Err(CliError::Validation("threads: must be positive".into()));
    }
    Ok(cfg)
}

fn init_log(dir: &Path) -> Result<(), CliError> {
    let path = dir.join("run.log");
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .target(env_logger::Target::Pipe(Box::new(file)))
        .try_init()
        .map_err(|e| io_err(&path, e))
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = resolve(args)?;
    let dir = cfg.output.clone();
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    init_log(&dir)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    pool.build_global()
        .map_err(|e| CliError::Validation(format!("threads: {e}")))?;
    let threads = rayon::current_num_threads();
    log::info!(
        "tb-defect {} ({} threads, seed {})",
        env!("CARGO_PKG_VERSION"),
        threads,
        cfg.seed
    );
    log::info!("config {}", args.config.display());

    let outcome = study::execute(&cfg);
    let (report, error) = match outcome {
        Ok(r) => {
            let failure = r.failure.clone().map(CliError::Numerical);
            (Some(r), failure)
        }
        Err(e) => (None, Some(CliError::from(e))),
    };
    let mut files = Vec::new();
    if let Some(r) = &report {
        for t in &r.tables {
            t.write(&dir).map_err(|e| io_err(&dir.join(&t.name), e))?;
            log::info!("wrote {} ({} rows)", t.name, t.rows.len());
            files.push(t.name.clone());
        }
        for (name, pass) in &r.gates {
            log::info!("gate {name}: {}", if *pass { "pass" } else { "fail" });
        }
    }
    if let Some(e) = &error {
        log::error!("{e}");
    }
    let summary = Summary {
        tool: "tb-defect",
        version: env!("CARGO_PKG_VERSION"),
        library_version: tbdefect::VERSION,
        command: cfg.command.name(),
        config: &cfg,
        threads,
        seconds: start.elapsed().as_secs_f64(),
        incomplete: error.is_some(),
        error: error.as_ref().map(|e| e.to_string()),
        gates: report.as_ref().map(|r| r.gates.clone()).unwrap_or_default(),
        files,
        results: report.map_or(serde_json::Value::Null, |r| r.results),
    };
    let path = dir.join("summary.json");
    let bytes = report::to_json(&summary).map_err(|e| io_err(&path, e))?;
    std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    log::info!("finished in {:.3} s", summary.seconds);
    match error {
        Some(e) => Err(e),
        None => {
            println!("{}: results in {}", summary.command, dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Cmd::Run(args) = cli.command;
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tb-defect: {e}");
            ExitCode::from(e.code())
        }
    }
}
