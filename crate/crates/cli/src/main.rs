//! `tsa`: pretrain backbones, evaluate adapter configurations on episodes,
//! run ablation grids and tabulate reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsa_core::adapters::{AdapterConfig, Attachment};
use tsa_core::backbone::export_weights;
use tsa_core::classifiers::HeadKind;
use tsa_core::episodes::Protocol;
use tsa_core::harness::{
    ablation_grid, aggregate_rank, append_csv, load_datasets, prepare, pretrain_backbone, read_csv, run_experiment,
    CsvRow, RunConfig, RunReport,
};
use tsa_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tsa", version, about = "Task-specific adapters for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone on the seen domains and write its weights to --out.
    Pretrain(Common),
    /// Evaluate one method on every configured dataset.
    Eval(EvalArgs),
    /// Run the ablation grid described by the config's `ablation` table.
    Ablate(EvalArgs),
    /// Print a method x dataset table with average ranks.
    Report {
        /// JSON run reports or long-form CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output path: weights for `pretrain`, a JSON report for `eval`, a
    /// directory of reports for `ablate`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Long-form CSV to append rows to.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Adapter code, e.g. `Ad-R-M-PA`, `PA` or `none`.
    #[arg(long)]
    adapter: Option<AdapterConfig>,
    /// Attachment, e.g. `all`, `block3-4`, `from-stage2`.
    #[arg(long)]
    attachment: Option<Attachment>,
    /// Classifier head: ncc, md, lr, softmax, knn{k}, finetune.
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Backbone weights (skips pretraining).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Adaptation iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Comma-separated dataset names to evaluate.
    #[arg(long, value_delimiter = ',')]
    datasets: Option<Vec<String>>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.pretrain.seed = seed;
    }
    if let Some(n) = common.episodes {
        cfg.episodes = n;
    }
    if let Some(n) = common.workers {
        cfg.workers = n;
    }
    Ok(cfg)
}

fn eval_config(args: &EvalArgs) -> Result<RunConfig> {
    let mut cfg = load_config(&args.common)?;
    if let Some(a) = &args.adapter {
        let attachment = cfg.adapter.attachment.clone();
        cfg.adapter = a.clone().with_attachment(attachment);
    }
    if let Some(a) = &args.attachment {
        cfg.adapter = cfg.adapter.with_attachment(a.clone());
    }
    if let Some(h) = args.head {
        cfg.head = h;
    }
    if let Some(p) = args.protocol {
        cfg.protocol = p;
    }
    if let Some(w) = &args.weights {
        cfg.backbone.weights = Some(w.clone());
    }
    if let Some(n) = args.iterations {
        cfg.adapt.iterations = n;
    }
    if let Some(d) = &args.datasets {
        cfg.datasets = d.clone();
    }
    if let Some(csv) = &args.csv {
        cfg.csv = Some(csv.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &RunReport) {
    println!("{}  ({:.2}% trainable)", report.method, 100.0 * report.params.fraction);
    for d in &report.datasets {
        let tag = if d.seen { "seen" } else { "unseen" };
        println!(
            "  {:<16} {:<6} {:6.2} +- {:5.2}  ({} episodes)",
            d.name,
            tag,
            100.0 * d.mean,
            100.0 * d.ci95,
            d.n_episodes
        );
    }
}

fn pretrain(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Config("pretrain needs --out for the weights file".into()))?;
    let datasets = load_datasets(&cfg)?;
    let (weights, log) = pretrain_backbone(&cfg, &datasets)?;
    export_weights(&weights, &out)?;
    println!("final loss {:.4}; weights written to {}", log.tail_loss(20), out.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = eval_config(args)?;
    cfg.out = args.common.out.clone().or(cfg.out);
    let report = run_experiment(&cfg)?;
    print_report(&report);
    Ok(())
}

fn ablate(args: &EvalArgs) -> Result<()> {
    let cfg = eval_config(args)?;
    let prepared = prepare(&cfg)?;
    let (reports, rows) = ablation_grid(&cfg, &cfg.ablation, &prepared)?;
    if let Some(dir) = &args.common.out {
        std::fs::create_dir_all(dir)?;
        for (i, r) in reports.iter().enumerate() {
            r.save(dir.join(format!("report-{i:03}.json")))?;
        }
    }
    if let Some(csv) = &cfg.csv {
        append_csv(csv, &rows)?;
    }
    for r in &reports {
        print_report(r);
    }
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    if path.extension().is_some_and(|e| e == "csv") {
        read_csv(path)
    } else {
        Ok(RunReport::load(path)?.csv_rows())
    }
}

fn report(inputs: &[PathBuf]) -> Result<()> {
    let mut table: BTreeMap<String, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    let mut datasets: Vec<String> = Vec::new();
    for path in inputs {
        for row in read_rows(path)? {
            if !datasets.contains(&row.dataset) {
                datasets.push(row.dataset.clone());
            }
            table.entry(row.method).or_default().insert(row.dataset, (row.mean_acc, row.ci95));
        }
    }
    let means: BTreeMap<String, BTreeMap<String, f64>> = table
        .iter()
        .map(|(m, row)| (m.clone(), row.iter().map(|(d, v)| (d.clone(), v.0)).collect()))
        .collect();
    let ranks = aggregate_rank(&means).ok();
    print!("{:<32}", "method");
    for d in &datasets {
        print!(" {d:>16}");
    }
    println!(" {:>8}", "rank");
    for (method, row) in &table {
        print!("{method:<32}");
        for d in &datasets {
            match row.get(d) {
                Some((m, c)) => print!(" {:>16}", format!("{:.2}+-{:.2}", 100.0 * m, 100.0 * c)),
                None => print!(" {:>16}", "-"),
            }
        }
        match ranks.as_ref().and_then(|r| r.get(method)) {
            Some(r) => println!(" {r:>8.2}"),
            None => println!(" {:>8}", "-"),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => pretrain(&common),
        Command::Eval(args) => eval(&args),
        Command::Ablate(args) => ablate(&args),
        Command::Report { inputs } => report(&inputs),
        Command::Config(common) => {
            print!("{}", load_config(&common)?.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
