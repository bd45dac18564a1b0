use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use btxforge_core::data::{read_jsonl, validate_conversations, SftRecord};
use btxforge_core::eval::{routing_stats, run_benchmark, specialization_score, SuiteManifest};
use btxforge_core::merge::{MergeError, MergeManifest};
use btxforge_core::model::Checkpoint;
use btxforge_core::moe::RoutingTrace;
use btxforge_core::pipeline::{parse_stages, run_pipeline, validate_config, ExperimentConfig, PipelineError};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "btxforge", version, about = "Branch-train-mix experiments on dual-script toy corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file, or the name of a shipped profile.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out_dir` or `runs/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate corpora, the instruction mix and the evaluation suite.
    GenData(RunArgs),
    /// Run training stages (base, branch, sft, dpo).
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "base,branch,sft,dpo")]
        stages: String,
    },
    /// Merge checkpoints from a merge manifest or an experiment config.
    Merge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a suite, or run the eval stage of an experiment.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, requires = "suite")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Script-by-expert routing table of a trace file, or the route stage.
    RouteStats {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an instruction-data JSONL file.
    ValidateData {
        #[arg(long)]
        data: PathBuf,
    },
    /// Check an experiment config without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the whole pipeline or a subset of its stages.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of data,base,branch,merge,sft,dpo,eval,route.
        #[arg(long)]
        stages: Option<String>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(m: impl ToString) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: m.to_string(),
        }
    }

    fn runtime(m: impl ToString) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: m.to_string(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match e {
            PipelineError::Invalid(_) | PipelineError::UnknownStage(_) => EXIT_VALIDATION,
            PipelineError::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|r| Failure::validation(format!("invalid config {}:\n{r}", path.display())))
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
}

fn run_stages(config: &Path, out: Option<PathBuf>, stages: Option<&str>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let out = out_dir(&cfg, out);
    let stages = parse_stages(stages)?;
    let summary = run_pipeline(&cfg, &stages, &out, &mut |line| eprintln!("{line}"))?;
    for (stage, status) in summary.stages {
        println!("{stage}\t{status:?}");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn merge(config: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(config).unwrap_or_default();
    if MergeManifest::parse(&text).is_ok() {
        let mut manifest = MergeManifest::load(config).map_err(Failure::validation)?;
        if let Some(o) = out {
            manifest.output = o;
        }
        let merged = manifest.run::<f32>().map_err(|e| match e {
            MergeError::Manifest(_) | MergeError::Incompatible(_) | MergeError::TooFewSources(_) => Failure::validation(e),
            other => Failure::runtime(other),
        })?;
        println!("{}\t{}", manifest.output.display(), merged.metadata);
        return Ok(());
    }
    run_stages(config, out, Some("merge"))
}

fn eval(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    suite: Option<PathBuf>,
    seed: u64,
    json: Option<PathBuf>,
) -> Result<(), Failure> {
    match (checkpoint, suite, config) {
        (Some(ckpt), Some(suite), _) => {
            let model = Checkpoint::<f32>::load(&ckpt).map_err(Failure::runtime)?;
            let tasks = SuiteManifest::load(&suite).map_err(Failure::validation)?;
            let report = run_benchmark(&model, &tasks, seed).map_err(Failure::runtime)?;
            print!("{}", report.to_table());
            if let Some(j) = json {
                std::fs::write(j, report.to_json()).map_err(Failure::runtime)?;
            }
            Ok(())
        }
        (_, _, Some(cfg)) => run_stages(&cfg, out, Some("eval")),
        _ => Err(Failure::validation("eval needs --checkpoint with --suite, or --config")),
    }
}

fn route_stats(trace: Option<PathBuf>, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    match (trace, config) {
        (Some(t), _) => {
            let text = std::fs::read_to_string(&t).map_err(Failure::runtime)?;
            let traces = RoutingTrace::parse_text(&text).map_err(Failure::validation)?;
            let stats = routing_stats(&traces).map_err(Failure::validation)?;
            print!("{}", stats.to_table());
            match specialization_score(&stats) {
                Ok(s) => println!("specialization\t{s:.4}"),
                Err(e) => println!("specialization\tn/a ({e})"),
            }
            Ok(())
        }
        (None, Some(cfg)) => run_stages(&cfg, out, Some("route")),
        (None, None) => Err(Failure::validation("route-stats needs --trace or --config")),
    }
}

fn validate_data(path: &Path) -> Result<(), Failure> {
    let records: Vec<SftRecord> = read_jsonl(path).map_err(Failure::validation)?;
    let (accepted, rejected) = validate_conversations(&records);
    for r in &rejected {
        println!("record {}\t{}", r.record, r.rule.as_str());
    }
    println!("accepted {} of {}", accepted.len(), records.len());
    if rejected.is_empty() {
        Ok(())
    } else {
        Err(Failure::validation(format!("{} records rejected", rejected.len())))
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(run) => run_stages(&run.config, run.out, Some("data")),
        Command::Train { run, stages } => {
            let wanted = parse_stages(Some(&stages))?;
            if let Some(s) = wanted.iter().find(|s| !["base", "branch", "sft", "dpo"].contains(s)) {
                return Err(Failure::validation(format!("{s} is not a training stage")));
            }
            run_stages(&run.config, run.out, Some(&stages))
        }
        Command::Merge { config, out } => merge(&config, out),
        Command::Eval {
            config,
            out,
            checkpoint,
            suite,
            seed,
            json,
        } => eval(config, out, checkpoint, suite, seed, json),
        Command::RouteStats { trace, config, out } => route_stats(trace, config, out),
        Command::ValidateData { data } => validate_data(&data),
        Command::ValidateConfig { config } => {
            let report = validate_config(&config);
            print!("{report}");
            if report.is_valid() {
                Ok(())
            } else {
                Err(Failure::validation(format!("{} problem(s)", report.issues.len())))
            }
        }
        Command::Pipeline { run, stages } => run_stages(&run.config, run.out, stages.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
