mod commands;
mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use prompt_typing::{ErrorKind, Execution};
use serde::Serialize;

use commands::data::{PrepareVerbalizer, PrepareVerbalizerArgs, SampleFewshot, SampleFewshotArgs};
use commands::eval::{Evaluate, EvaluateArgs, ReportTypes, ReportTypesArgs};
use commands::model::{Predict, PredictArgs, Train, TrainArgs};
use commands::selfsup::{GeneratePairs, GeneratePairsArgs, PretrainSelfsup, PretrainSelfsupArgs};
use commands::{check_outputs_disjoint, Command, Ctx};
use config::UsageError;
use manifest::{hash_inputs, RunManifest};

const DEFAULT_MANIFEST: &str = "ptype-manifest.json";

/// Fine-grained entity typing with cloze prompts.
#[derive(Debug, Parser)]
#[command(name = "ptype", version)]
struct Cli {
    /// TOML file; each subcommand reads the table named after it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// More log output on standard error; repeat for trace level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors on standard error.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Build a verbalizer from a label list or dataset.
    PrepareVerbalizer(PrepareVerbalizerArgs),
    /// Draw k examples per type.
    SampleFewshot(SampleFewshotArgs),
    /// Mine positive and negative pairs from a linked corpus.
    GeneratePairs(GeneratePairsArgs),
    /// Train in ft or prompt mode and report dev and test metrics.
    Train(TrainArgs),
    /// Self-supervised pre-training on mined pairs.
    PretrainSelfsup(PretrainSelfsupArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Predict types with a saved backend.
    Predict(PredictArgs),
    /// Per-type breakdown of errors as CSV.
    ReportTypes(ReportTypesArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<prompt_typing::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Capability => 4,
            };
        }
        if cause.is::<UsageError>() {
            return 2;
        }
    }
    3
}

struct Outcome {
    manifest: RunManifest,
    manifest_path: PathBuf,
    result: anyhow::Result<()>,
}

struct Globals {
    file: Option<toml::Table>,
    manifest: Option<PathBuf>,
    exec: Execution,
}

fn drive<C: Command>(args: &impl Serialize, g: &Globals) -> Outcome {
    let started = Instant::now();
    let started_at_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut manifest = RunManifest {
        subcommand: C::NAME.to_string(),
        artifact_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        config: serde_json::Value::Null,
        seeds: BTreeMap::new(),
        execution: format!("{:?}", g.exec).to_lowercase(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        started_at_unix,
        wall_clock_seconds: 0.0,
        exit_code: 0,
        error: None,
    };
    let mut manifest_path = g.manifest.clone();
    let mut ctx = Ctx::new(g.exec);
    let result = (|| {
        let merged = config::merge(C::NAME, g.file.as_ref(), args)?;
        manifest.config = serde_json::Value::Object(merged.clone());
        let settings: C = config::resolve(C::NAME, &merged)?;
        manifest.config = serde_json::to_value(&settings)?;
        manifest.seeds = settings.seeds();
        if manifest_path.is_none() {
            manifest_path = settings.out_dir().map(|d| d.join("manifest.json"));
        }
        let inputs = settings.inputs();
        manifest.inputs = hash_inputs(&inputs);
        check_outputs_disjoint(&inputs, &settings.outputs())?;
        if let Some(m) = &manifest_path {
            check_outputs_disjoint(&inputs, std::slice::from_ref(m))?;
        }
        settings.run(&mut ctx)
    })();
    manifest.outputs = ctx.outputs;
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    Outcome {
        manifest,
        manifest_path: manifest_path.unwrap_or_else(|| PathBuf::from(DEFAULT_MANIFEST)),
        result,
    }
}

fn run(cli: Cli) -> Outcome {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let file = match cli
        .config
        .as_deref()
        .map(config::load_config_file)
        .transpose()
    {
        Ok(f) => f,
        Err(e) => {
            return failed_before_dispatch(
                cli.manifest.as_deref(),
                subcommand_name(&cli.command),
                e,
            );
        }
    };
    let g = Globals {
        file,
        manifest: cli.manifest,
        exec,
    };
    match &cli.command {
        Cmd::PrepareVerbalizer(a) => drive::<PrepareVerbalizer>(a, &g),
        Cmd::SampleFewshot(a) => drive::<SampleFewshot>(a, &g),
        Cmd::GeneratePairs(a) => drive::<GeneratePairs>(a, &g),
        Cmd::Train(a) => drive::<Train>(a, &g),
        Cmd::PretrainSelfsup(a) => drive::<PretrainSelfsup>(a, &g),
        Cmd::Evaluate(a) => drive::<Evaluate>(a, &g),
        Cmd::Predict(a) => drive::<Predict>(a, &g),
        Cmd::ReportTypes(a) => drive::<ReportTypes>(a, &g),
    }
}

fn subcommand_name(c: &Cmd) -> &'static str {
    match c {
        Cmd::PrepareVerbalizer(_) => PrepareVerbalizer::NAME,
        Cmd::SampleFewshot(_) => SampleFewshot::NAME,
        Cmd::GeneratePairs(_) => GeneratePairs::NAME,
        Cmd::Train(_) => Train::NAME,
        Cmd::PretrainSelfsup(_) => PretrainSelfsup::NAME,
        Cmd::Evaluate(_) => Evaluate::NAME,
        Cmd::Predict(_) => Predict::NAME,
        Cmd::ReportTypes(_) => ReportTypes::NAME,
    }
}

fn failed_before_dispatch(
    manifest: Option<&Path>,
    subcommand: &str,
    err: anyhow::Error,
) -> Outcome {
    Outcome {
        manifest: RunManifest {
            subcommand: subcommand.to_string(),
            artifact_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            execution: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            wall_clock_seconds: 0.0,
            exit_code: 0,
            error: None,
        },
        manifest_path: manifest.map_or_else(|| PathBuf::from(DEFAULT_MANIFEST), Path::to_path_buf),
        result: Err(err),
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code != 0 {
                let out = failed_before_dispatch(None, "", config::usage(e.kind().to_string()));
                let mut m = out.manifest;
                m.exit_code = 2;
                m.error = Some(e.kind().to_string());
                if let Err(w) = m.write(&out.manifest_path) {
                    eprintln!("warning: could not write run manifest: {w:#}");
                }
            }
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose, cli.quiet);
    let Outcome {
        mut manifest,
        manifest_path,
        result,
    } = run(cli);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => exit_code(e),
    };
    manifest.exit_code = i32::from(code);
    if let Err(e) = &result {
        log::error!("{e:#}");
        manifest.error = Some(format!("{e:#}"));
    }
    if let Err(e) = manifest.write(&manifest_path) {
        log::error!(
            "could not write run manifest {}: {e:#}",
            manifest_path.display()
        );
        if code == 0 {
            return ExitCode::from(3);
        }
    }
    ExitCode::from(code)
}
