use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dplot::adapt::{AdaptConfig, Method};
use dplot::checkpoint::{load_checkpoint, save_checkpoint};
use dplot::config::{Precision, RunConfig};
use dplot::harness::{self, BenchReport, MetricsRecord, Pools};
use dplot::model::BlockNet;
use dplot::selection::{select_blocks, SelectionReport};
use dplot::{Error, Result};
use dplot_tensor::Scalar;

#[derive(Parser)]
#[command(name = "dplot", version, about = "Online test-time adaptation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache the train/val/test pools.
    GenData(Args),
    /// Train the source model on clean images and save a checkpoint.
    Pretrain(Args),
    /// Score every block and write the selection report.
    SelectBlocks(Args),
    /// Run one method over the stream for every seed.
    Adapt(Args),
    /// Run every configured method over identical streams.
    Bench(Args),
    /// Run the component, threshold and pseudo-label ablations.
    Ablate(Args),
    /// Per-sample prediction with a buffered update.
    SingleSample(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML run configuration; relative paths inside it resolve against its
    /// directory.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    gamma: Option<f64>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr_entropy: Option<f64>,
    #[arg(long)]
    lr_consistency: Option<f64>,
    #[arg(long)]
    buffer: Option<usize>,
    #[arg(long)]
    freq: Option<f64>,
}

impl Command {
    fn args(&self) -> &Args {
        match self {
            Command::GenData(a)
            | Command::Pretrain(a)
            | Command::SelectBlocks(a)
            | Command::Adapt(a)
            | Command::Bench(a)
            | Command::Ablate(a)
            | Command::SingleSample(a) => a,
        }
    }
}

fn load_config(args: &Args) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(g) = args.gamma {
        cfg.selection.gamma = g;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = &args.method {
        cfg.method = m.parse()?;
    }
    if let Some(a) = args.alpha {
        cfg.adapt.alpha = a;
    }
    if let Some(l) = args.lr_entropy {
        cfg.adapt.lr_entropy = l;
    }
    if let Some(l) = args.lr_consistency {
        cfg.adapt.lr_consistency = l;
    }
    if let Some(b) = args.buffer {
        cfg.single_sample.buffer = b;
    }
    if let Some(k) = args.freq {
        cfg.single_sample.freq = k;
    }
    cfg.validate()?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let p = &mut cfg.paths;
    for path in [&mut p.data, &mut p.checkpoint, &mut p.selection, &mut p.metrics, &mut p.report]
        .into_iter()
        .flatten()
    {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    if p.metrics.is_none() {
        p.metrics = Some(base.join("metrics.csv"));
    }
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str, command: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("paths.{key} is required for {command}")))
}

fn write_json<S: serde::Serialize>(value: &S, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Invalid(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn load_model<T: Scalar>(cfg: &RunConfig, command: &str) -> Result<BlockNet<T>> {
    let dir = required(&cfg.paths.checkpoint, "checkpoint", command)?;
    if !dir.exists() {
        return Err(Error::Invalid(format!(
            "checkpoint {} not found; run `dplot pretrain` first",
            dir.display()
        )));
    }
    let loaded = load_checkpoint::<T>(dir)?;
    if loaded.model.arch() != &cfg.arch() {
        return Err(Error::SpecMismatch(format!(
            "checkpoint {} was trained for another architecture",
            dir.display()
        )));
    }
    Ok(loaded.model)
}

fn load_report(cfg: &RunConfig) -> Result<Option<SelectionReport>> {
    match &cfg.paths.selection {
        Some(p) if p.exists() => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
            let r: SelectionReport = serde_json::from_str(&text)
                .map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
            Ok(Some(r))
        }
        _ => Ok(None),
    }
}

/// Adaptation config with the selected blocks filled in when a method needs
/// them.
fn resolve_adapt(cfg: &RunConfig, methods: &[Method], report: Option<&SelectionReport>) -> Result<AdaptConfig> {
    let mut adapt = cfg.adapt.clone();
    if adapt.selected_blocks.is_empty() {
        if let Some(r) = report {
            adapt.selected_blocks = r.with_gamma(cfg.selection.gamma)?.selected;
        }
    }
    if let Some(m) = methods.iter().find(|m| m.needs_selection()) {
        if adapt.selected_blocks.is_empty() {
            return Err(Error::Config(format!(
                "method {m} needs selected blocks: set adapt.selected_blocks or run `dplot select-blocks` with paths.selection"
            )));
        }
    }
    Ok(adapt)
}

fn finish(cfg: &RunConfig, report: &BenchReport, records: &[MetricsRecord]) -> Result<()> {
    let metrics = cfg.paths.metrics.as_deref().expect("metrics path defaulted");
    harness::write_metrics(records, metrics)?;
    if let Some(p) = &cfg.paths.report {
        write_json(report, p)?;
    }
    for r in &report.runs {
        println!(
            "{:<28} error {:6.2}%  clean {:5.2}% -> {:5.2}%{}",
            r.run_id,
            100.0 * r.mean_error,
            100.0 * r.clean_error_before,
            100.0 * r.clean_error_after,
            if r.collapsed { "  [collapsed]" } else { "" }
        );
    }
    println!("median over {} seed(s):", cfg.seeds.len());
    for (label, e) in &report.median_error {
        println!("  {label:<24} {:6.2}%", 100.0 * e);
    }
    println!("metrics written to {}", metrics.display());
    Ok(())
}

fn run<T: Scalar>(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::GenData(_) => {
            let dir = required(&cfg.paths.data, "data", "gen-data")?;
            let pools = harness::make_pools(cfg)?;
            harness::save_pools(&pools, dir, cfg)?;
            println!(
                "wrote {} train, {} val, {} test images to {}",
                pools.train.len(),
                pools.val.len(),
                pools.test.len(),
                dir.display()
            );
        }
        Command::Pretrain(_) => {
            let dir = required(&cfg.paths.checkpoint, "checkpoint", "pretrain")?;
            let pools = harness::load_or_make_pools(cfg)?;
            let (model, report) =
                harness::pretrain::<T>(&cfg.arch(), &pools.train, &pools.val, &cfg.pretrain, cfg.eval_batch)?;
            let meta: BTreeMap<String, serde_json::Value> = [
                ("clean_val_error".to_string(), serde_json::json!(report.clean_val_error)),
                ("pretrain".to_string(), serde_json::to_value(&cfg.pretrain).expect("serializable")),
            ]
            .into();
            save_checkpoint(&model, dir, meta)?;
            println!(
                "trained {} steps; clean validation error {:.2}%; checkpoint at {}",
                report.steps,
                100.0 * report.clean_val_error,
                dir.display()
            );
        }
        Command::SelectBlocks(_) => {
            let out = required(&cfg.paths.selection, "selection", "select-blocks")?;
            let mut model = load_model::<T>(cfg, "select-blocks")?;
            let pools = harness::load_or_make_pools(cfg)?;
            let source = pools.train.slice(0, cfg.selection.source_size.min(pools.train.len()))?;
            let s = &cfg.selection;
            let report = select_blocks(&mut model, &source, s.gamma, s.perturbation, &s.em, s.seed)?;
            write_json(&report, out)?;
            if let Some(w) = &report.warning {
                eprintln!("warning: {w}");
            }
            for (i, (raw, scaled)) in report.raw.iter().zip(&report.scaled).enumerate() {
                let mark = if report.selected.contains(&(i + 1)) { "*" } else { " " };
                println!("{mark} block {:>2}: similarity {raw:.6}  scaled {scaled:.4}", i + 1);
            }
            println!("selected blocks at gamma {}: {:?}", report.gamma, report.selected);
        }
        Command::Adapt(_) | Command::Bench(_) => {
            let methods = if matches!(command, Command::Adapt(_)) { vec![cfg.method] } else { cfg.methods.clone() };
            let model = load_model::<T>(cfg, "adapt")?;
            let adapt = resolve_adapt(cfg, &methods, load_report(cfg)?.as_ref())?;
            let pools: Pools = harness::load_or_make_pools(cfg)?;
            let (report, records) = harness::run_benchmark(&model, &methods, &adapt, cfg, &pools)?;
            finish(cfg, &report, &records)?;
        }
        Command::Ablate(_) => {
            let model = load_model::<T>(cfg, "ablate")?;
            let sel = load_report(cfg)?;
            let adapt = resolve_adapt(cfg, &[Method::Dplot], sel.as_ref())?;
            let variants = harness::ablation_variants(cfg, &adapt, sel.as_ref())?;
            let pools = harness::load_or_make_pools(cfg)?;
            let (report, records) = harness::run_ablation(&model, &variants, cfg, &pools)?;
            finish(cfg, &report, &records)?;
        }
        Command::SingleSample(_) => {
            let model = load_model::<T>(cfg, "single-sample")?;
            let adapt = resolve_adapt(cfg, &[cfg.method], load_report(cfg)?.as_ref())?;
            let pools = harness::load_or_make_pools(cfg)?;
            let mut summaries = Vec::new();
            let mut records = Vec::new();
            for &seed in &cfg.seeds {
                let ctx = harness::context(cfg, &pools, seed);
                let r = harness::run_single_sample(&model, cfg.method, &adapt, &cfg.single_sample, &ctx)?;
                summaries.push(r.summary);
                records.extend(r.records);
            }
            finish(cfg, &harness::summarize(summaries), &records)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(cli.command.args()).and_then(|cfg| match cfg.precision {
        Precision::F32 => run::<f32>(&cli.command, &cfg),
        Precision::F64 => run::<f64>(&cli.command, &cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Diverged(_) => 3,
                _ => 1,
            })
        }
    }
}
