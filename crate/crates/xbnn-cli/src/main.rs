//! Command-line driver: train, reconstruct, simulate, sweep, power, report.
//!
//! Every verb accepts `--config <json>` to load a full experiment
//! description; explicit flags override individual fields. The dataset root
//! resolves from `--data-root`, then `XBNN_DATA_ROOT`, then `./data/<set>`.
//! The seed defaults to 42 and is always printed.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xbnn::experiment::{
    export_report, report_csv, run_experiment, run_sweep, DatasetKind, ExperimentConfig,
};
use xbnn::model_io::{load_model, save_model};
use xbnn::power::{estimate, PowerConfig};
use xbnn::quantizer::QuantKind;
use xbnn::reconstruct::{reconstruct_network, split_pattern, ReconstructMode};
use xbnn::train::TrainConfig;
use xbnn::xbar::{count_interfaces, plan_tiling, CellMode, OutputMode};

#[derive(Parser)]
#[command(name = "xbnn", about = "RRAM-crossbar BNN simulator and mapping compiler", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline binary MLP and save it.
    Train(CommonOpts),
    /// Split a trained model for a given array capacity (optionally retrain).
    Reconstruct(CommonOpts),
    /// Map a model onto arrays and simulate test-set inference.
    Simulate(CommonOpts),
    /// Sweep ADC resolutions and quantizer kinds over one trained model.
    Sweep(SweepOpts),
    /// Estimate interface power for a mapped model.
    Power(CommonOpts),
    /// Run the full pipeline and write CSV + JSON reports.
    Report(CommonOpts),
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report label for this model.
    #[arg(long)]
    model_name: Option<String>,
    /// Dataset: mnist | cifar10.
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset root directory.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Layer sizes, e.g. 784,1024,1024,10.
    #[arg(long, value_delimiter = ',')]
    arch: Option<Vec<usize>>,
    /// Array input capacity R.
    #[arg(long)]
    capacity: Option<usize>,
    /// Cell mode: a | b.
    #[arg(long)]
    cell_mode: Option<String>,
    /// Output interface: sa-1bit | ideal | adc.
    #[arg(long)]
    output: Option<String>,
    /// ADC resolution in bits (with --output adc).
    #[arg(long)]
    bits: Option<u32>,
    /// Partial-sum quantizer: linear | lloyd-max.
    #[arg(long)]
    quantizer: Option<String>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Retraining epochs after splitting (0 = none).
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Split the network before mapping (true/false).
    #[arg(long)]
    reconstruct: Option<bool>,
    /// RNG seed (default 42).
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on simulated test inputs.
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Load this model instead of training.
    #[arg(long)]
    model_in: Option<PathBuf>,
    /// Save the resulting model here.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// CSV report path (report verb).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON report path (report verb).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SweepOpts {
    #[command(flatten)]
    common: CommonOpts,
    /// ADC bit widths to sweep, e.g. 1,2,3,4.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    sweep_bits: Vec<u32>,
    /// Quantizer kinds to sweep.
    #[arg(long, value_delimiter = ',', default_value = "linear,lloyd-max")]
    kinds: Vec<String>,
}

fn parse_kind(s: &str) -> Result<QuantKind> {
    match s {
        "linear" => Ok(QuantKind::Linear),
        "lloyd-max" => Ok(QuantKind::LloydMax),
        other => bail!("unknown quantizer `{other}` (expected linear | lloyd-max)"),
    }
}

impl CommonOpts {
    fn build_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.model_name {
            cfg.model_name = v.clone();
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = match v.as_str() {
                "mnist" => DatasetKind::Mnist,
                "cifar10" => DatasetKind::Cifar10,
                other => bail!("unknown dataset `{other}` (expected mnist | cifar10)"),
            };
        }
        if self.data_root.is_some() {
            cfg.data_root = self.data_root.clone();
        }
        if let Some(v) = &self.arch {
            cfg.arch = v.clone();
        }
        if let Some(v) = self.capacity {
            cfg.capacity = v;
        }
        if let Some(v) = &self.cell_mode {
            cfg.cell_mode = match v.as_str() {
                "a" | "A" => CellMode::A,
                "b" | "B" => CellMode::B,
                other => bail!("unknown cell mode `{other}` (expected a | b)"),
            };
        }
        if let Some(v) = &self.output {
            cfg.output = match v.as_str() {
                "sa-1bit" => OutputMode::Sa1Bit,
                "ideal" => OutputMode::Ideal,
                "adc" => OutputMode::Adc {
                    bits: self.bits.context("--output adc requires --bits")?,
                },
                other => bail!("unknown output mode `{other}` (expected sa-1bit | ideal | adc)"),
            };
        } else if let (Some(bits), OutputMode::Adc { .. }) = (self.bits, cfg.output) {
            cfg.output = OutputMode::Adc { bits };
        }
        if let Some(v) = &self.quantizer {
            cfg.quantizer = parse_kind(v)?;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.retrain_epochs {
            cfg.retrain_epochs = v;
        }
        if let Some(v) = self.reconstruct {
            cfg.reconstruct = v;
        }
        if let Some(v) = self.seed {
            cfg.train = TrainConfig { seed: v, ..cfg.train };
        }
        if self.eval_limit.is_some() {
            cfg.eval_limit = self.eval_limit;
        }
        if self.model_in.is_some() {
            cfg.model_in = self.model_in.clone();
        }
        if self.model_out.is_some() {
            cfg.model_out = self.model_out.clone();
        }
        Ok(cfg)
    }
}

fn announce(cfg: &ExperimentConfig) {
    println!("seed: {}", cfg.seed());
    println!("config hash: {}", cfg.hash());
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(opts) => {
            let mut cfg = opts.build_config()?;
            cfg.reconstruct = false;
            cfg.retrain_epochs = 0;
            cfg.output = OutputMode::Ideal;
            announce(&cfg);
            let result = run_experiment(&cfg)?;
            println!(
                "trained {} ({:?}); test accuracy {:.4}",
                cfg.model_name, cfg.arch, result.report.baseline_accuracy
            );
            if let Some(path) = &cfg.model_out {
                println!("model written to {}", path.display());
            }
        }
        Command::Reconstruct(opts) => {
            let cfg = opts.build_config()?;
            announce(&cfg);
            let path = cfg.model_in.clone().context("reconstruct requires --model-in")?;
            let baseline = load_model(&path)?;
            let mut net = reconstruct_network(&baseline, cfg.capacity, ReconstructMode::Mapped)?;
            if cfg.retrain_epochs > 0 {
                let ds = match cfg.dataset {
                    DatasetKind::Mnist => xbnn::data::ingest_mnist(&cfg.resolved_data_root())?,
                    DatasetKind::Cifar10 => xbnn::data::ingest_cifar10(&cfg.resolved_data_root())?,
                };
                let train = xbnn::train::TensorDataset::from_split(&ds.train, ds.classes);
                let rcfg = TrainConfig { epochs: cfg.retrain_epochs, ..cfg.train };
                net = xbnn::train::retrain_split(&net, &train, &rcfg)?.0;
            }
            println!(
                "split pattern at R={}: {:?}",
                cfg.capacity,
                split_pattern(&net, cfg.capacity)
            );
            let out = cfg.model_out.clone().context("reconstruct requires --model-out")?;
            save_model(&net, &out)?;
            println!("model written to {}", out.display());
        }
        Command::Simulate(opts) => {
            let mut cfg = opts.build_config()?;
            if cfg.model_in.is_none() {
                bail!("simulate requires --model-in (train a model first)");
            }
            cfg.reconstruct = matches!(cfg.output, OutputMode::Sa1Bit);
            announce(&cfg);
            let result = run_experiment(&cfg)?;
            let row = &result.report.rows[0];
            println!(
                "mode {} bits {}: accuracy {:.4} on {} arrays",
                row.mode, row.bits, row.accuracy, row.arrays
            );
        }
        Command::Sweep(opts) => {
            let cfg = opts.common.build_config()?;
            announce(&cfg);
            let kinds = opts
                .kinds
                .iter()
                .map(|s| parse_kind(s))
                .collect::<Result<Vec<_>>>()?;
            let report = run_sweep(&cfg, &kinds, &opts.sweep_bits)?;
            print!("{}", report_csv(&report));
            if let (Some(csv), Some(json)) = (&opts.common.csv, &opts.common.json) {
                export_report(&report, csv, json)?;
                println!("reports written to {} and {}", csv.display(), json.display());
            }
        }
        Command::Power(opts) => {
            let cfg = opts.build_config()?;
            announce(&cfg);
            let path = cfg.model_in.clone().context("power requires --model-in")?;
            let net = load_model(&path)?;
            let plan = plan_tiling(&net, &cfg.array_config()?)?;
            let census = count_interfaces(&plan);
            let report = estimate(&census, &PowerConfig::default())?;
            print!("{}", report.text_table());
        }
        Command::Report(opts) => {
            let cfg = opts.build_config()?;
            announce(&cfg);
            let result = run_experiment(&cfg)?;
            let csv = opts.csv.clone().unwrap_or_else(|| PathBuf::from("report.csv"));
            let json = opts.json.clone().unwrap_or_else(|| PathBuf::from("report.json"));
            export_report(&result.report, &csv, &json)?;
            print!("{}", report_csv(&result.report));
            println!("reports written to {} and {}", csv.display(), json.display());
        }
    }
    Ok(())
}
