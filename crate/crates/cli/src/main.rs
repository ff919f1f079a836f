use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use taskaffinity::experiments::{self, ErrorKind, Experiment, ExperimentError, ExperimentReport, RunConfig};
use taskaffinity::paneldata::{apply_overlap, generate_panel};

/// Gradient-conflict task analysis on synthetic and measured panels.
#[derive(Parser)]
#[command(name = "taskaffinity", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic panel and its designed similarity to disk.
    Generate(Common),
    /// Run one experiment and write its JSON and CSV reports.
    Run {
        #[arg(value_parser = parse_experiment)]
        experiment: Experiment,
        #[command(flatten)]
        common: Common,
    },
    /// Report pairwise sample overlap and reliability regimes of a panel CSV.
    Audit {
        panel: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Replace the configured seeds with as many consecutive seeds starting here.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads for independent experiment cells.
    #[arg(long)]
    parallel: Option<usize>,
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    s.parse()
}

#[derive(Debug)]
enum CliError {
    Experiment(ExperimentError),
    Config(String),
    Output(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Output(_) => 3,
            CliError::Experiment(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Experiment(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Output(m) => write!(f, "output error: {m}"),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Experiment(e)
    }
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    match &common.config {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }
}

/// Loads, resolves and applies command-line overrides.
fn prepare(common: &Common, experiment: Experiment, raw: RunConfig) -> Result<RunConfig, CliError> {
    if let Some(n) = common.parallel {
        if n == 0 {
            return Err(CliError::Config("--parallel must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))?;
    }
    let mut cfg = raw.resolve(experiment)?;
    if let Some(base) = common.seed_override {
        cfg = cfg.with_seed_base(base).resolve(experiment)?;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| output_err(dir, e))
}

/// First 12 hex digits of the SHA-256 of the echoed configuration.
fn config_hash(report: &ExperimentReport) -> String {
    let canonical = serde_json::to_string(&report.config_echo).expect("json value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))[..12].to_owned()
}

fn write_report(report: &ExperimentReport, out: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    ensure_dir(out)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let stem = format!("{}_{}_{}", report.name, stamp, config_hash(report));
    let json_path = out.join(format!("{stem}.json"));
    let csv_path = out.join(format!("{stem}.csv"));
    let json = report.to_json().map_err(|e| output_err(&json_path, e))?;
    fs::write(&json_path, json).map_err(|e| output_err(&json_path, e))?;
    let csv = report.to_csv().map_err(|e| output_err(&csv_path, e))?;
    fs::write(&csv_path, csv).map_err(|e| output_err(&csv_path, e))?;
    Ok((json_path, csv_path))
}

fn cmd_run(experiment: Experiment, common: &Common, raw: RunConfig) -> Result<(), CliError> {
    let cfg = prepare(common, experiment, raw)?;
    let report = experiments::run(&cfg)?;
    let (json, csv) = write_report(&report, &common.out)?;
    println!("{}", json.display());
    println!("{}", csv.display());
    Ok(())
}

fn cmd_generate(common: &Common) -> Result<(), CliError> {
    let raw = load_config(common)?;
    let explicit_alpha = raw.alpha;
    let experiment = raw.experiment.unwrap_or(Experiment::Validate);
    let cfg = prepare(common, experiment, raw)?;
    let seed = cfg.seeds()[0];
    let (mut panel, truth) = generate_panel(cfg.panel(), seed).map_err(ExperimentError::from)?;
    if let Some(alpha) = explicit_alpha {
        panel = apply_overlap(&panel, alpha, seed).map_err(ExperimentError::from)?;
    }
    ensure_dir(&common.out)?;

    let panel_path = common.out.join(format!("panel_seed{seed}.csv"));
    panel.write_csv_path(&panel_path).map_err(|e| output_err(&panel_path, e))?;

    let truth_path = common.out.join(format!("ground_truth_seed{seed}.csv"));
    let file = fs::File::create(&truth_path).map_err(|e| output_err(&truth_path, e))?;
    truth
        .similarity
        .write_csv(panel.task_names(), file)
        .map_err(|e| output_err(&truth_path, e))?;

    let weights_path = common.out.join(format!("weights_seed{seed}.csv"));
    write_weights(&weights_path, panel.task_names(), &truth.weights).map_err(|e| output_err(&weights_path, e))?;

    for p in [&panel_path, &truth_path, &weights_path] {
        println!("{}", p.display());
    }
    Ok(())
}

fn write_weights(path: &Path, names: &[String], weights: &[Vec<f64>]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    let width = weights.first().map_or(0, Vec::len);
    let mut header = vec!["task".to_owned()];
    header.extend((0..width).map(|l| format!("latent_{l}")));
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(weights) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(common) => cmd_generate(common),
        Command::Run { experiment, common } => {
            load_config(common).and_then(|raw| cmd_run(*experiment, common, raw))
        }
        Command::Audit { panel, common } => load_config(common).and_then(|mut raw| {
            raw.panel_csv = Some(panel.clone());
            cmd_run(Experiment::Audit, common, raw)
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
