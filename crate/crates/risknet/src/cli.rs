//! Command-line interface.
//!
//! Every subcommand prints exactly one single-line JSON metrics object to
//! stdout (for scripting) and writes its artifact — scenario JSON, penalty
//! CSV, dataset directory, checkpoint, prediction, risk report, or
//! calibration CSV — to the path given with `--out`.
//!
//! Exit codes: 0 on success, 1 on a usage error (bad flags or argument
//! values), 2 on a data error (unreadable, inconsistent, or numerically
//! broken inputs).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::dataset::{self, DatasetConfig, ScenarioGenConfig, Split};
use crate::error::{Error, Result};
use crate::metagraph::{build_metagraph, extract_features};
use crate::model::{self, Hyper, Mode};
use crate::provisioning::Scenario;
use crate::reliability::ReliabilityConfig;
use crate::risk;
use crate::simulator::simulate;
use crate::sndlib::import_sndlib;
use crate::training::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "risknet",
    version,
    about = "SLA penalty risk: protected-network simulation and a neural surrogate"
)]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = automatic). Never changes any result.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output artifact path; each subcommand documents what it writes.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random protected scenario (writes scenario JSON).
    Generate(GenerateArgs),
    /// Simulate yearly SLA penalties of a scenario (writes penalty CSV).
    Simulate(SimulateArgs),
    /// Generate, simulate, and index a training dataset (writes a directory).
    BuildDataset(BuildDatasetArgs),
    /// Train the surrogate on a dataset (writes a checkpoint JSON).
    Train(TrainArgs),
    /// Compare model NLL against the feature-blind baseline on a split.
    Evaluate(EvaluateArgs),
    /// Predict per-SLA penalty distributions (writes prediction JSON).
    Predict(PredictArgs),
    /// Per-SLA VaR/CVaR and the network bound (writes a report JSON).
    Risk(RiskArgs),
    /// Calibration curve of model or baseline on a split (writes CSV).
    Ppplot(PpplotArgs),
    /// Convert an SNDLib native-format network (writes topology JSON).
    ImportSndlib(ImportSndlibArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 16)]
    routers: usize,
    /// Preferential-attachment links per new router.
    #[arg(long, default_value_t = 2)]
    ba_m: usize,
    #[arg(long, default_value_t = 1000.0)]
    layout_scale_km: f64,
    #[arg(long, default_value_t = 50)]
    layout_iterations: usize,
    /// Fraction of unordered router pairs that request an SLA.
    #[arg(long, default_value_t = 0.25)]
    pair_fraction: f64,
    /// Backup capacity margin over working demand.
    #[arg(long, default_value_t = 0.1)]
    xi: f64,
    #[arg(long, default_value_t = 16)]
    k_max: usize,
    /// Link failure intensity per km and year.
    #[arg(long, default_value_t = 0.002)]
    lambda_per_km: f64,
    /// Shared-backup overbuild factor.
    #[arg(long, default_value_t = 0.7)]
    rho: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON produced by `generate` or `build-dataset`.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    years: usize,
    /// Write every cell, not only nonzero penalties.
    #[arg(long)]
    dense: bool,
}

#[derive(Args)]
struct BuildDatasetArgs {
    #[arg(long, default_value_t = 60)]
    topologies: usize,
    /// Router count range `lo:hi`, inclusive.
    #[arg(long, value_parser = parse_usize_range, default_value = "10:20")]
    routers: (usize, usize),
    #[arg(long, default_value_t = 100)]
    years: usize,
    #[arg(long, default_value_t = 2)]
    ba_m: usize,
    #[arg(long, default_value_t = 1000.0)]
    layout_scale_km: f64,
    #[arg(long, default_value_t = 50)]
    layout_iterations: usize,
    #[arg(long, default_value_t = 0.25)]
    pair_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    xi: f64,
    #[arg(long, default_value_t = 16)]
    k_max: usize,
    #[arg(long, default_value_t = 0.002)]
    lambda_per_km: f64,
    /// Overbuild factor range `lo:hi`, drawn uniformly per topology.
    #[arg(long, value_parser = parse_f64_range, default_value = "0.5:1.0")]
    rho: (f64, f64),
    /// Train,test,validation fractions over topologies.
    #[arg(long, value_parser = parse_three_f64, default_value = "0.7,0.15,0.15")]
    splits: (f64, f64, f64),
    /// Per-topology simulation budget in seconds; over-budget topologies
    /// are dropped and recorded in the manifest.
    #[arg(long)]
    timeout_s: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `build-dataset`.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr0: f64,
    #[arg(long, default_value_t = 20)]
    warm_epochs: usize,
    #[arg(long, default_value_t = 0.99)]
    decay: f64,
    #[arg(long, default_value_t = 80)]
    max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 64)]
    msg_dim: usize,
    /// Message-passing iterations.
    #[arg(long, default_value_t = 6)]
    t_steps: usize,
    /// Dropout rates of the first two readout layers.
    #[arg(long, value_parser = parse_two_f64, default_value = "0.2,0.1")]
    dropout: (f64, f64),
    /// Squared-entry penalty on the message weights.
    #[arg(long, default_value_t = 0.01)]
    l2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Validation,
    All,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
            SplitArg::Validation => "validation",
            SplitArg::All => "all",
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint JSON from `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory from `build-dataset`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
    split: SplitArg,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    /// Monte-Carlo dropout passes; 0 uses one deterministic pass.
    #[arg(long, default_value_t = 0)]
    mc_passes: usize,
}

#[derive(Args)]
struct RiskArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    /// Tail mass: 0.05 reports the 95th-percentile VaR/CVaR.
    #[arg(long, default_value_t = 0.05)]
    p: f64,
    /// Report in normalized units instead of monetary units.
    #[arg(long)]
    normalized: bool,
}

#[derive(Args)]
struct PpplotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
    split: SplitArg,
    /// Curve of the feature-blind baseline instead of the model.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct ImportSndlibArgs {
    /// SNDLib native-format file.
    #[arg(long)]
    input: PathBuf,
}

fn parse_usize_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
    Ok((lo, hi))
}

fn parse_f64_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
    Ok((lo, hi))
}

fn parse_two_f64(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected two comma-separated values".into());
    }
    let a = parts[0].trim().parse().map_err(|e| format!("bad first value: {e}"))?;
    let b = parts[1].trim().parse().map_err(|e| format!("bad second value: {e}"))?;
    Ok((a, b))
}

fn parse_three_f64(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated values".into());
    }
    let mut values = [0.0; 3];
    for (v, p) in values.iter_mut().zip(&parts) {
        *v = p.trim().parse().map_err(|e| format!("bad value: {e}"))?;
    }
    Ok((values[0], values[1], values[2]))
}

/// Parses argv, configures the thread pool, dispatches, and maps errors to
/// the documented exit codes.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
        if let Err(e) = pool {
            eprintln!("error: cannot configure {} worker threads: {e}", cli.threads);
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Param(_) => 1,
                _ => 2,
            })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let out = cli.out;
    match cli.command {
        Command::Generate(args) => cmd_generate(args, seed, out),
        Command::Simulate(args) => cmd_simulate(args, seed, out),
        Command::BuildDataset(args) => cmd_build_dataset(args, seed, out),
        Command::Train(args) => cmd_train(args, seed, out),
        Command::Evaluate(args) => cmd_evaluate(args, out),
        Command::Predict(args) => cmd_predict(args, seed, out),
        Command::Risk(args) => cmd_risk(args, out),
        Command::Ppplot(args) => cmd_ppplot(args, out),
        Command::ImportSndlib(args) => cmd_import_sndlib(args, out),
    }
}

fn require_out(out: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.ok_or_else(|| Error::param(format!("this command writes {what}; pass --out <path>")))
}

fn print_metrics(value: serde_json::Value) {
    println!("{value}");
}

fn load_checkpoint(
    path: &Path,
) -> Result<(model::ModelParams, Hyper, crate::metagraph::NormStats)> {
    model::checkpoint_from_json(&std::fs::read_to_string(path)?)
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::from_json(&std::fs::read_to_string(path)?)
}

/// The examples of one split, in dataset order.
fn split_examples(dataset: &dataset::Dataset, split: SplitArg) -> Vec<&model::Example> {
    let wanted = match split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Test => Some(Split::Test),
        SplitArg::Validation => Some(Split::Validation),
        SplitArg::All => None,
    };
    dataset
        .examples
        .iter()
        .enumerate()
        .filter(|(i, _)| wanted.is_none_or(|w| dataset.example_split[*i] == w))
        .map(|(_, ex)| ex)
        .collect()
}

fn cmd_generate(args: GenerateArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "the scenario JSON")?;
    let config = ScenarioGenConfig {
        n_routers: args.routers,
        ba_m: args.ba_m,
        layout_scale_km: args.layout_scale_km,
        layout_iterations: args.layout_iterations,
        pair_fraction: args.pair_fraction,
        xi: args.xi,
        k_max: args.k_max,
        reliability: ReliabilityConfig {
            lambda_per_km: args.lambda_per_km,
            ..ReliabilityConfig::default()
        },
        rho: args.rho,
    };
    let scenario = dataset::generate_scenario(&config, seed)?;
    std::fs::write(&out, scenario.to_json()?)?;
    print_metrics(json!({
        "command": "generate",
        "routers": scenario.topology().n_routers(),
        "links": scenario.topology().n_links(),
        "n_slas": scenario.slas().len(),
        "seed": seed,
        "out": out,
    }));
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "the penalty CSV")?;
    let scenario = load_scenario(&args.scenario)?;
    let started = Instant::now();
    let table = simulate(&scenario, args.years, seed)?;
    let sim_seconds = started.elapsed().as_secs_f64();
    std::fs::write(&out, table.to_csv(args.dense)?)?;
    print_metrics(json!({
        "command": "simulate",
        "years": table.years(),
        "n_slas": table.n_slas(),
        "total_penalty": table.total(),
        "sim_seconds": sim_seconds,
        "seed": seed,
        "out": out,
    }));
    Ok(())
}

fn cmd_build_dataset(args: BuildDatasetArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "the dataset directory")?;
    let config = DatasetConfig {
        n_topologies: args.topologies,
        router_range: args.routers,
        years_per_topology: args.years,
        ba_m: args.ba_m,
        layout_scale_km: args.layout_scale_km,
        layout_iterations: args.layout_iterations,
        pair_fraction: args.pair_fraction,
        xi: args.xi,
        k_max: args.k_max,
        reliability: ReliabilityConfig {
            lambda_per_km: args.lambda_per_km,
            ..ReliabilityConfig::default()
        },
        rho_range: args.rho,
        split_fractions: args.splits,
        topology_timeout: args.timeout_s.map(std::time::Duration::from_secs_f64),
        seed,
    };
    let started = Instant::now();
    let manifest = dataset::build_dataset(&config, &out)?;
    let examples: usize = manifest.entries.iter().map(|e| e.years).sum();
    print_metrics(json!({
        "command": "build-dataset",
        "entries": manifest.entries.len(),
        "skipped": manifest.skipped.len(),
        "examples": examples,
        "build_seconds": started.elapsed().as_secs_f64(),
        "seed": seed,
        "out": out,
    }));
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "the checkpoint JSON")?;
    let dataset = dataset::load_dataset(&args.data)?;
    let config = TrainConfig {
        hyper: Hyper {
            hidden_dim: args.hidden_dim,
            msg_dim: args.msg_dim,
            t_steps: args.t_steps,
            dropout_rates: args.dropout,
            l2_coeff: args.l2,
            ..Hyper::default()
        },
        batch_size: args.batch_size,
        lr0: args.lr0,
        warm_epochs: args.warm_epochs,
        decay: args.decay,
        max_epochs: args.max_epochs,
        patience: args.patience,
        seed,
    };
    let started = Instant::now();
    let report = training::train_on_dataset(&config, &dataset)?;
    let train_seconds = started.elapsed().as_secs_f64();
    std::fs::write(
        &out,
        model::checkpoint_to_json(&report.best_params, &config.hyper, &dataset.manifest.norm)?,
    )?;
    if let Some(metrics_path) = &args.metrics {
        std::fs::write(metrics_path, training::metrics_csv(&report.history))?;
    }
    print_metrics(json!({
        "command": "train",
        "epochs": report.history.len(),
        "best_epoch": report.best_epoch,
        "best_val_nll": report.best_val_loss,
        "stopped_early": report.stopped_early,
        "train_seconds": train_seconds,
        "seed": seed,
        "out": out,
    }));
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, out: Option<PathBuf>) -> Result<()> {
    let (params, hyper, norm) = load_checkpoint(&args.ckpt)?;
    let dataset = dataset::load_dataset(&args.data)?;
    if norm != dataset.manifest.norm {
        return Err(Error::data(
            "checkpoint and dataset normalization statistics differ; \
             evaluating would mix incompatible units",
        ));
    }
    let examples = split_examples(&dataset, args.split);
    if examples.is_empty() {
        return Err(Error::data(format!("split {:?} holds no examples", args.split.name())));
    }
    let labels: Vec<f64> =
        examples.iter().flat_map(|ex| ex.labels.iter().copied()).collect();
    let model_nll = model::mean_nll(&params, &hyper, &examples)?;
    let baseline = risk::baseline_nll(&labels, hyper.nu)?;
    let metrics = json!({
        "command": "evaluate",
        "split": args.split.name(),
        "n_examples": examples.len(),
        "n_entries": labels.len(),
        "model_nll": model_nll,
        "baseline_nll": baseline,
        "information_gain_bits": risk::information_gain_bits(model_nll, baseline),
    });
    if let Some(out) = out {
        std::fs::write(&out, format!("{metrics:#}\n"))?;
    }
    print_metrics(metrics);
    Ok(())
}

/// Prediction artifact: per-SLA t-distribution parameters in normalized
/// units plus the equivalent monetary location/scale.
#[derive(Serialize)]
struct PredictionJson {
    n_slas: usize,
    nu: f64,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    monetary_location: Vec<f64>,
    monetary_scale: Vec<f64>,
}

fn cmd_predict(args: PredictArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "the prediction JSON")?;
    let (params, hyper, norm) = load_checkpoint(&args.ckpt)?;
    let scenario = load_scenario(&args.scenario)?;

    // The timer covers the surrogate pipeline: featurization, normalization
    // and the forward pass — not file IO or checkpoint parsing.
    let started = Instant::now();
    let metagraph = build_metagraph(&scenario);
    let features = norm.normalize_features(&extract_features(&scenario));
    let prediction = if args.mc_passes > 0 {
        model::predict_mc_dropout(&params, &hyper, &metagraph, &features, args.mc_passes, seed)?
    } else {
        model::forward(&params, &hyper, &metagraph, &features, Mode::Eval)?
    };
    let infer_seconds = started.elapsed().as_secs_f64();

    let artifact = PredictionJson {
        n_slas: prediction.mu.len(),
        nu: hyper.nu,
        monetary_location: prediction.mu.iter().map(|&m| norm.denormalize_location(m)).collect(),
        monetary_scale: prediction.sigma.iter().map(|&s| norm.denormalize_scale(s)).collect(),
        mu: prediction.mu,
        sigma: prediction.sigma,
    };
    std::fs::write(&out, serde_json::to_string_pretty(&artifact)?)?;
    print_metrics(json!({
        "command": "predict",
        "n_slas": artifact.n_slas,
        "mc_passes": args.mc_passes,
        "infer_seconds": infer_seconds,
        "out": out,
    }));
    Ok(())
}

fn cmd_risk(args: RiskArgs, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "the risk report JSON")?;
    let (params, hyper, norm) = load_checkpoint(&args.ckpt)?;
    let scenario = load_scenario(&args.scenario)?;
    let metagraph = build_metagraph(&scenario);
    let features = norm.normalize_features(&extract_features(&scenario));
    let prediction = model::forward(&params, &hyper, &metagraph, &features, Mode::Eval)?;
    let report = risk::risk_report(
        &prediction,
        args.p,
        hyper.nu,
        if args.normalized { None } else { Some(&norm) },
    )?;
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    print_metrics(json!({
        "command": "risk",
        "p": report.p,
        "n_slas": report.var.len(),
        "network_cvar_bound": report.network_cvar_bound,
        "denormalized": report.denormalized,
        "out": out,
    }));
    Ok(())
}

fn cmd_ppplot(args: PpplotArgs, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "the calibration CSV")?;
    let (params, hyper, norm) = load_checkpoint(&args.ckpt)?;
    let dataset = dataset::load_dataset(&args.data)?;
    if norm != dataset.manifest.norm {
        return Err(Error::data(
            "checkpoint and dataset normalization statistics differ; \
             the calibration curve would mix incompatible units",
        ));
    }
    let examples = split_examples(&dataset, args.split);
    if examples.is_empty() {
        return Err(Error::data(format!("split {:?} holds no examples", args.split.name())));
    }
    let grid = risk::default_grid();
    let data = if args.baseline {
        risk::ppplot_baseline(&examples, &grid, hyper.nu)?
    } else {
        risk::ppplot_model(&params, &hyper, &examples, &grid)?
    };
    std::fs::write(&out, data.to_csv())?;
    print_metrics(json!({
        "command": "ppplot",
        "split": args.split.name(),
        "baseline": args.baseline,
        "n": data.n,
        "max_abs_deviation": data.max_abs_deviation(),
        "out": out,
    }));
    Ok(())
}

fn cmd_import_sndlib(args: ImportSndlibArgs, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out, "the topology JSON")?;
    let topology = import_sndlib(&std::fs::read_to_string(&args.input)?)?;
    std::fs::write(&out, topology.to_json()?)?;
    print_metrics(json!({
        "command": "import-sndlib",
        "routers": topology.n_routers(),
        "links": topology.n_links(),
        "out": out,
    }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_declaration_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn range_and_tuple_parsers() {
        assert_eq!(parse_usize_range("10:20").unwrap(), (10, 20));
        assert!(parse_usize_range("10-20").is_err());
        assert_eq!(parse_f64_range("0.5:1.0").unwrap(), (0.5, 1.0));
        assert_eq!(parse_two_f64("0.2, 0.1").unwrap(), (0.2, 0.1));
        assert!(parse_two_f64("0.2").is_err());
        assert_eq!(parse_three_f64("0.7,0.15,0.15").unwrap(), (0.7, 0.15, 0.15));
        assert!(parse_three_f64("0.7,0.3").is_err());
    }
}
