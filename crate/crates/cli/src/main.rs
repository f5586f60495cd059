//! `wadeable` command-line entry point.
//!
//! Exit codes: 0 success, 1 domain failure (violations, missing gold labels,
//! failed queries, no data), 2 environment failure (unreadable files, bad
//! config, port in use).

mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use wadeable::dataset::{
    agreement_histogram, consensus_labels, read_annotations, validate_manifest, AgreementStats,
    ConsensusPolicy, DatasetError, DatasetManifest,
};
use wadeable::eval::{
    emit_report, group_report, read_predictions, EvalError, GroupAxis, ReportDocument,
    ReportFormat, PREDICTIONS_FILE,
};
use wadeable::run::{execute, RunConfig, RunError, RUN_FILE};
use wadeable_service::{AppState, ServiceConfig, DEFAULT_BIND};

#[derive(Parser)]
#[command(name = "wadeable", version, about = "Rate water-body traversability with vision-language models")]
struct Cli {
    /// Dataset root (directory containing manifest.json).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory; meaning depends on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run config file (TOML) for `rate`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More logging: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the dataset manifest, masks and annotation store.
    Validate,
    /// Query the configured models for every instance and write a run directory.
    Rate,
    /// Score a run against consensus labels and write report.json / report.md.
    Eval(EvalArgs),
    /// Histogram of annotator disagreement (text, CSV and PNG).
    Agreement(AgreementArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `rate`.
    #[arg(long)]
    run: PathBuf,
    /// How gold labels are derived from the annotators' ratings.
    #[arg(long, default_value = "median")]
    gold: ConsensusPolicy,
    /// Comma-separated axes: model, strategy, temperature, robot, query_mode.
    #[arg(long, value_delimiter = ',', default_value = "model,strategy,temperature")]
    group_by: Vec<GroupAxis>,
}

#[derive(Args)]
struct AgreementArgs {
    #[arg(long, default_value_t = 0.25)]
    bin_width: f64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = DEFAULT_BIND)]
    bind: String,
    /// Annotation store; defaults to annotations.jsonl in the dataset root.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Built annotation UI to serve at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Shuffle each annotator's task order with this seed.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Print the UI URL once the service is listening.
    #[arg(long)]
    open: bool,
}

enum Failure {
    Domain(String),
    Env(String),
}

type CmdResult = Result<(), Failure>;

fn env<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Env(e.to_string())
}

fn dataset_failure(e: DatasetError) -> Failure {
    match e {
        DatasetError::NoAnnotations | DatasetError::EmptyRatings => Failure::Domain(e.to_string()),
        other => Failure::Env(other.to_string()),
    }
}

fn require_dataset(cli: &Cli) -> Result<&Path, Failure> {
    cli.dataset
        .as_deref()
        .ok_or_else(|| Failure::Env("--dataset is required".into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();

    let result = match &cli.command {
        Command::Validate => cmd_validate(&cli),
        Command::Rate => cmd_rate(&cli),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Agreement(args) => cmd_agreement(&cli, args),
        Command::Serve(args) => cmd_serve(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Env(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn cmd_validate(cli: &Cli) -> CmdResult {
    let root = require_dataset(cli)?;
    let manifest = DatasetManifest::read_unchecked(root).map_err(env)?;
    let violations = validate_manifest(&manifest);

    println!("images: {}", manifest.images.len());
    println!("instances: {}", manifest.instances.len());
    println!("robots: {}", manifest.robots.len());
    println!(
        "instance-robot keys: {}",
        manifest.instances.len() * manifest.robots.len()
    );
    // Unreadable stores are reported as violations below; counts use what parses.
    if let Ok(records) = read_annotations(manifest.annotations_path()) {
        let mut per_annotator: BTreeMap<String, usize> = BTreeMap::new();
        for r in wadeable::dataset::latest_per_key(&records) {
            *per_annotator.entry(r.annotator_id).or_default() += 1;
        }
        for (annotator, keys) in &per_annotator {
            println!("annotator {annotator}: {keys} instance-robot keys");
        }
    }
    for v in &violations {
        println!("{}: {}: {}", v.entity, v.rule.name(), v.detail);
    }
    println!("{} violations", violations.len());
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Domain(format!("{} violations", violations.len())))
    }
}

fn cmd_rate(cli: &Cli) -> CmdResult {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Env("rate needs --config <run.toml>".into()))?;
    let mut config = RunConfig::load(path).map_err(env)?;
    if let Some(d) = &cli.dataset {
        config.dataset = d.clone();
    }
    if let Some(o) = &cli.out {
        config.output_dir = o.clone();
    }
    let summary = execute(&config).map_err(|e| match e {
        RunError::Records(e) => Failure::Domain(e.to_string()),
        other => Failure::Env(other.to_string()),
    })?;
    println!("run directory: {}", summary.run_dir.display());
    println!(
        "queries: {} total, {} already recorded, {} sent",
        summary.queries_total, summary.queries_skipped, summary.queries_sent
    );
    println!(
        "predictions written: {} ({} unparseable)",
        summary.predictions_written, summary.parse_failures
    );
    println!("cost-maps written: {}", summary.costmaps_written);
    if summary.query_errors > 0 {
        return Err(Failure::Domain(format!(
            "{} queries got no answer; see errors.jsonl and rerun to retry them",
            summary.query_errors
        )));
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> CmdResult {
    let preds = read_predictions(args.run.join(PREDICTIONS_FILE)).map_err(|e| match e {
        EvalError::Malformed { .. } => Failure::Domain(e.to_string()),
        other => Failure::Env(other.to_string()),
    })?;
    if preds.is_empty() {
        return Err(Failure::Domain(format!(
            "no predictions in {}",
            args.run.display()
        )));
    }
    let dataset = match &cli.dataset {
        Some(d) => d.clone(),
        None => {
            let run_file = args.run.join(RUN_FILE);
            let text = fs::read_to_string(&run_file)
                .map_err(|e| Failure::Env(format!("{}: {e} (pass --dataset)", run_file.display())))?;
            let config: RunConfig = serde_json::from_str(&text)
                .map_err(|e| Failure::Env(format!("{}: {e}", run_file.display())))?;
            config.dataset
        }
    };
    let manifest = DatasetManifest::read_unchecked(&dataset).map_err(env)?;
    let annotations = read_annotations(manifest.annotations_path()).map_err(dataset_failure)?;
    let gold = consensus_labels(&annotations, args.gold);
    let grouped = match group_report(&preds, &gold, &args.group_by) {
        Ok(g) => g,
        Err(EvalError::MissingGold(keys)) => {
            for k in &keys {
                println!("no gold label: {} / {}", k.instance_id, k.robot_id);
            }
            return Err(Failure::Domain(format!("{} predicted keys have no gold label", keys.len())));
        }
        Err(e) => return Err(Failure::Domain(e.to_string())),
    };
    let agreement = agreement_histogram(&annotations, 0.25).ok();
    let doc = ReportDocument {
        run_id: preds.first().map(|p| p.run_id.clone()),
        gold_policy: Some(policy_name(args.gold).to_string()),
        group_by: grouped.group_by,
        reports: grouped.reports,
        leaderboard: grouped.leaderboard,
        agreement,
    };
    let out = cli.out.clone().unwrap_or_else(|| args.run.clone());
    fs::create_dir_all(&out).map_err(env)?;
    for (name, format) in [("report.json", ReportFormat::Json), ("report.md", ReportFormat::Markdown)] {
        let path = out.join(name);
        fs::write(&path, emit_report(&doc, format))
            .map_err(|e| Failure::Env(format!("{}: {e}", path.display())))?;
    }
    for e in &doc.leaderboard {
        println!(
            "{}: macro F1 {:.4}, failure rate {:.4} ({} predictions)",
            e.group, e.macro_f1, e.failure_rate, e.n_predictions
        );
    }
    println!("reports written to {}", out.display());
    Ok(())
}

fn policy_name(p: ConsensusPolicy) -> &'static str {
    match p {
        ConsensusPolicy::Median => "median",
        ConsensusPolicy::Mean => "mean",
    }
}

fn histogram_csv(stats: &AgreementStats) -> String {
    let mut csv = String::from("bin_lo,bin_hi,count\n");
    for b in &stats.histogram {
        csv.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
    }
    csv
}

fn cmd_agreement(cli: &Cli, args: &AgreementArgs) -> CmdResult {
    let root = require_dataset(cli)?;
    let manifest = DatasetManifest::read_unchecked(root).map_err(env)?;
    let records = read_annotations(manifest.annotations_path()).map_err(dataset_failure)?;
    let stats = agreement_histogram(&records, args.bin_width).map_err(dataset_failure)?;

    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(env)?;
    let csv_path = out.join("agreement.csv");
    fs::write(&csv_path, histogram_csv(&stats)).map_err(|e| Failure::Env(format!("{}: {e}", csv_path.display())))?;
    let png_path = out.join("agreement.png");
    plot::histogram_png(&stats)
        .save(&png_path)
        .map_err(|e| Failure::Env(format!("{}: {e}", png_path.display())))?;

    let max = stats.histogram.iter().map(|b| b.count).max().unwrap_or(0).max(1);
    println!("std dev of ratings per (instance, robot), {} keys", stats.per_key.len());
    for b in &stats.histogram {
        let bar = "#".repeat((b.count * 40).div_ceil(max) as usize);
        println!("[{:.3}, {:.3}) {:>5} {bar}", b.lo, b.hi, b.count);
    }
    println!("share below 1.0: {:.3}", stats.fraction_below(1.0));
    println!("wrote {} and {}", csv_path.display(), png_path.display());
    Ok(())
}

fn cmd_serve(cli: &Cli, args: &ServeArgs) -> CmdResult {
    let root = require_dataset(cli)?;
    let mut config = ServiceConfig::new(root);
    config.store_path = args.store.clone();
    config.ui_dir = args.ui_dir.clone();
    config.shuffle_seed = args.shuffle_seed;
    let state = Arc::new(AppState::open(config).map_err(env)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(env)?;
    runtime.block_on(async {
        let listener = wadeable_service::bind(&args.bind).await.map_err(env)?;
        let addr = listener.local_addr().map_err(env)?;
        if args.open {
            println!("annotation UI: http://{addr}/");
        } else {
            println!("listening on {addr}");
        }
        wadeable_service::serve(listener, state, shutdown_signal())
            .await
            .map_err(env)
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
