use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hfs_core::checkpoint::Checkpoint;
use hfs_core::formats::FeatureMatrix;
use hfs_core::gradcheck::run_gradcheck;
use hfs_core::selector::top_k;
use hfs_core::setobj::{oracle_check, AscentOptions};
use hfs_core::synthdata::{generate_episode, read_dataset, write_dataset, EpisodeSpec, Task};
use hfs_core::trainer::{evaluate, Trainer};
use hfs_core::{Error, ErrorKind, SetObjectiveConfig, TrainConfig};

const MAX_ORACLE_N: usize = 12;

#[derive(Parser)]
#[command(name = "hfs", version, about = "Set-level key-frame selection: data, training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus JSONL metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint with noiseless top-k selection.
    Eval(EvalArgs),
    /// Score frames from a feature file and print the selected indices.
    Select(SelectArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(GradcheckArgs),
    /// Compare relaxed set-objective ascent against exhaustive search.
    OracleCheck(OracleCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Episode spec as JSON; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Index of the first episode; later indices of the same seed share its task.
    #[arg(long, default_value_t = 0)]
    first: u64,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Cot,
    Set,
    Kl,
    Sep,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config as JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Disable a component; repeat for several.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    /// Metrics JSONL path (default: the checkpoint path with `.metrics.jsonl` appended).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many optimizer steps have been taken.
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// HFSF file with the frame features and timestamps.
    #[arg(long)]
    features: PathBuf,
    /// HFSF file holding the query embedding as its rows.
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    k: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lambda_rel: Option<f64>,
    #[arg(long)]
    lambda_cov: Option<f64>,
    #[arg(long)]
    lambda_red: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Select(a) => select(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::OracleCheck(a) => oracle(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            exit_code(e.kind())
        }
    }
}

fn exit_code(kind: ErrorKind) -> ExitCode {
    match kind {
        ErrorKind::Validation => ExitCode::from(2),
        ErrorKind::Numeric => ExitCode::from(3),
        ErrorKind::Io => ExitCode::from(4),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn print_json(value: &serde_json::Value) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode, Error> {
    let mut spec: EpisodeSpec = read_json(a.spec.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    if a.out.is_dir() && std::fs::read_dir(&a.out)?.next().is_some() && !a.force {
        return Err(invalid(format!(
            "{} exists and is not empty; pass --force to overwrite",
            a.out.display()
        )));
    }
    let task = Task::new(&spec)?;
    let episodes = (a.first..a.first + a.count as u64)
        .map(|i| generate_episode(&spec, &task, i))
        .collect::<Result<Vec<_>, _>>()?;
    write_dataset(&a.out, &spec, &episodes)?;
    let feature_bytes: usize = episodes.iter().map(|e| e.frames.encoded_len()).sum();
    print_json(&json!({
        "episodes": episodes.len(),
        "feature_bytes": feature_bytes,
        "out": a.out,
        "spec": spec,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode, Error> {
    let data = read_dataset(&a.data)?;
    let (model, optimizer) = match &a.resume {
        Some(path) => {
            if a.config.is_some() || !a.ablate.is_empty() {
                return Err(invalid("--resume takes the config from the checkpoint"));
            }
            let (m, o) = Checkpoint::load(path)?.into_parts()?;
            (m, Some(o))
        }
        None => {
            let mut cfg: TrainConfig = read_json(a.config.as_deref())?;
            for ab in &a.ablate {
                match ab {
                    Ablation::Cot => cfg.disable_cot_query = true,
                    Ablation::Set => cfg.disable_set_objective = true,
                    Ablation::Kl => cfg.disable_kl = true,
                    Ablation::Sep => cfg.disable_sep = true,
                }
            }
            cfg.validate()?;
            (hfs_core::model::HfsModel::init(&cfg)?, None)
        }
    };
    let cfg = &model.config;
    if data.spec.n != cfg.n_frames || data.spec.d != cfg.dim {
        return Err(invalid(format!(
            "data has {} frames of dimension {}, config expects {} of {}",
            data.spec.n, data.spec.d, cfg.n_frames, cfg.dim
        )));
    }
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let mut trainer = Trainer::resume(model, optimizer, &data.episodes)?;
    let mut metrics = BufWriter::new(if a.resume.is_some() {
        File::options().append(true).create(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    });
    let records = trainer.run(a.until, Some(&mut metrics))?;
    metrics.flush()?;
    Checkpoint::new(&trainer.model, &trainer.optimizer).save(&a.out)?;
    print_json(&json!({
        "steps_taken": records.len(),
        "step": trainer.step(),
        "total_steps": trainer.total_steps(),
        "final_loss": records.last().map(|r| r.loss),
        "checkpoint": a.out,
        "metrics": metrics_path,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode, Error> {
    let (model, _) = Checkpoint::load(&a.ckpt)?.into_parts()?;
    let data = read_dataset(&a.data)?;
    let report = evaluate(&model, &data.episodes)?;
    let value = serde_json::to_value(&report)?;
    std::fs::write(&a.report, serde_json::to_string_pretty(&value)?)?;
    print_json(&value)?;
    Ok(ExitCode::SUCCESS)
}

fn select(a: SelectArgs) -> Result<ExitCode, Error> {
    let (model, _) = Checkpoint::load(&a.ckpt)?.into_parts()?;
    let frames = FeatureMatrix::read_file(&a.features)?;
    let query = FeatureMatrix::read_file(&a.query)?;
    if a.k == 0 || a.k > frames.n {
        return Err(invalid(format!("--k must be in 1..={}, got {}", frames.n, a.k)));
    }
    let context: Vec<Vec<f64>> = (0..query.n).map(|i| query.row(i).to_vec()).collect();
    let scores = model.scores(&frames, &context)?;
    let selected = top_k(&scores, a.k);
    print_json(&json!({ "scores": scores, "selected": selected }))?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode, Error> {
    let report = run_gradcheck(a.seed)?;
    print_json(&serde_json::to_value(&report)?)?;
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn oracle(a: OracleCheckArgs) -> Result<ExitCode, Error> {
    if a.n > MAX_ORACLE_N {
        return Err(invalid(format!("--n must be at most {MAX_ORACLE_N}, got {}", a.n)));
    }
    let mut cfg = SetObjectiveConfig::default();
    cfg.lambda_rel = a.lambda_rel.unwrap_or(cfg.lambda_rel);
    cfg.lambda_cov = a.lambda_cov.unwrap_or(cfg.lambda_cov);
    cfg.lambda_red = a.lambda_red.unwrap_or(cfg.lambda_red);
    let report = oracle_check(a.n, a.k, a.trials, a.seed, &cfg, &AscentOptions::default())?;
    print_json(&serde_json::to_value(&report)?)?;
    Ok(ExitCode::SUCCESS)
}
