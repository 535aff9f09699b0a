//! Experiment orchestration: train → reconstruct → map/retrain → simulate →
//! power, driven by a single JSON-loadable configuration. Every report
//! carries a hash of that configuration plus the seed, and contains nothing
//! non-deterministic (no timestamps, no host data), so re-running a config
//! reproduces its reports byte-identically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ingest_cifar10, ingest_mnist, Dataset};
use crate::error::Result;
use crate::model_io::{load_model, save_model, FORMAT_VERSION};
use crate::network::{NetInput, Network};
use crate::power::{estimate, PowerConfig, PowerReport};
use crate::quantizer::{lloyd_max_from_counts, QuantKind, QuantizerSpec};
use crate::reconstruct::{reconstruct_network, split_pattern, ReconstructMode};
use crate::train::{retrain_split, train_baseline, TensorDataset, TrainConfig};
use crate::xbar::{
    collect_partial_sums, count_interfaces, install_quantizers, plan_tiling, simulate,
    ArrayConfig, CellMode, InterfaceCensus, LayerRole, OutputMode, TilePlan,
};

/// Environment variable naming the default dataset root directory.
pub const DATA_ROOT_ENV: &str = "XBNN_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

/// Full description of one experiment run. Serializable to/from JSON for
/// archival runs; the CLI mirrors these fields as flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Label used in report rows.
    pub model_name: String,
    pub dataset: DatasetKind,
    /// Dataset root; falls back to `XBNN_DATA_ROOT`, then `./data/<set>`.
    pub data_root: Option<PathBuf>,
    /// Dense layer sizes, input through classes.
    pub arch: Vec<usize>,
    /// Array input capacity R.
    pub capacity: usize,
    pub cell_mode: CellMode,
    /// Array columns; defaults to the capacity (square mode-A array).
    pub array_cols: Option<usize>,
    pub output: OutputMode,
    pub quantizer: QuantKind,
    pub train: TrainConfig,
    /// Split the network before mapping (implied by SA_1BIT output).
    pub reconstruct: bool,
    /// Retraining epochs after splitting; 0 skips retraining.
    pub retrain_epochs: usize,
    /// Cap on simulated test inputs; `None` uses the whole test set.
    pub eval_limit: Option<usize>,
    /// Training inputs sampled to fit empirical quantizers.
    pub quant_fit_samples: usize,
    /// Load a trained model instead of training.
    pub model_in: Option<PathBuf>,
    /// Save the trained (or retrained) model.
    pub model_out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model_name: "mnist-mlp".into(),
            dataset: DatasetKind::Mnist,
            data_root: None,
            arch: vec![784, 1024, 1024, 10],
            capacity: 256,
            cell_mode: CellMode::A,
            array_cols: None,
            output: OutputMode::Sa1Bit,
            quantizer: QuantKind::Linear,
            train: TrainConfig::default(),
            reconstruct: true,
            retrain_epochs: 0,
            eval_limit: None,
            quant_fit_samples: 10_000,
            model_in: None,
            model_out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// SHA-256 of the canonical JSON form; identifies a run in reports.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn resolved_data_root(&self) -> PathBuf {
        if let Some(root) = &self.data_root {
            return root.clone();
        }
        let sub = match self.dataset {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        };
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(sub),
            None => PathBuf::from("data").join(sub),
        }
    }

    pub fn array_config(&self) -> Result<ArrayConfig> {
        let rows = match self.cell_mode {
            CellMode::A => self.capacity,
            CellMode::B => self.capacity * 2,
        };
        let cols = self.array_cols.unwrap_or(match self.cell_mode {
            CellMode::A => self.capacity,
            CellMode::B => self.capacity / 2,
        });
        ArrayConfig::new(rows, cols, self.cell_mode, self.output)
    }
}

/// One line of the accuracy/cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub r: usize,
    /// `sa-1bit`, `adc`, or `ideal`.
    pub mode: String,
    pub bits: u32,
    pub accuracy: f64,
    pub arrays: usize,
    pub interface_power: f64,
    pub total_power: f64,
    pub saving_vs_4bit: f64,
    pub saving_vs_3bit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub format_version: u32,
    pub config: ExperimentConfig,
    /// Baseline (software reference) test accuracy.
    pub baseline_accuracy: f64,
    /// Block count per layer; `None` marks unsplit (exempt or fitting) layers.
    pub split_pattern: Vec<Option<usize>>,
    pub rows: Vec<ReportRow>,
    pub census: InterfaceCensus,
    pub power: PowerReport,
}

/// Everything a run produces, including the plan for post-hoc assertions.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: ExperimentReport,
    pub network: Network,
    pub plan: TilePlan,
}

fn mode_name(mode: OutputMode) -> &'static str {
    match mode {
        OutputMode::Sa1Bit => "sa-1bit",
        OutputMode::Adc { .. } => "adc",
        OutputMode::Ideal => "ideal",
    }
}

fn mode_bits(mode: OutputMode, census: &InterfaceCensus) -> u32 {
    match mode {
        OutputMode::Sa1Bit => 1,
        OutputMode::Adc { bits } => bits,
        // ideal converters resolve every achievable level losslessly; report
        // the widest resolution the census assigned
        OutputMode::Ideal => census.adc_counts.keys().max().copied().unwrap_or(0),
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let root = cfg.resolved_data_root();
    match cfg.dataset {
        DatasetKind::Mnist => ingest_mnist(&root),
        DatasetKind::Cifar10 => ingest_cifar10(&root),
    }
}

/// Accuracy of the crossbar simulation over `(x, labels)`, batched to bound
/// memory.
pub fn simulated_accuracy(
    net: &Network,
    plan: &TilePlan,
    x: &Array2<i32>,
    labels: &[u8],
) -> Result<f64> {
    let n = labels.len();
    let mut correct = 0usize;
    let chunk = 1000usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let batch = x.slice(ndarray::s![start..end, ..]).to_owned();
        let result = simulate(net, plan, &NetInput::Flat(batch))?;
        for (pred, &label) in result.predictions().iter().zip(&labels[start..end]) {
            if *pred == label as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Per-layer-and-chunk histograms of calibration partial sums.
pub type SumHistograms = BTreeMap<usize, Vec<BTreeMap<i32, u64>>>;

/// Collect calibration partial sums over a training subset. The histogram
/// depends only on the network and chunk geometry, so sweeps over ADC
/// resolutions can reuse one collection.
pub fn collect_calibration_sums(
    net: &Network,
    plan: &TilePlan,
    train: &TensorDataset,
    cfg: &ExperimentConfig,
) -> Result<SumHistograms> {
    let n_fit = cfg.quant_fit_samples.min(train.y.len());
    let subset = train.x.slice(ndarray::s![..n_fit, ..]).to_owned();
    collect_partial_sums(net, plan, &NetInput::Flat(subset))
}

/// Fit per-layer-and-chunk quantizers from partial sums collected over a
/// training subset and install them into the plan. Linear plans keep the
/// sum-grid quantizers installed at planning time. `precollected` histograms
/// (from [`collect_calibration_sums`]) skip the collection pass.
pub fn fit_and_install_quantizers(
    net: &Network,
    plan: &mut TilePlan,
    train: &TensorDataset,
    cfg: &ExperimentConfig,
    precollected: Option<&SumHistograms>,
) -> Result<()> {
    let bits = match cfg.output {
        OutputMode::Adc { bits } => bits,
        _ => return Ok(()),
    };
    if cfg.quantizer == QuantKind::Linear {
        return Ok(());
    }
    let owned;
    let collected = match precollected {
        Some(c) => c,
        None => {
            owned = collect_calibration_sums(net, plan, train, cfg)?;
            &owned
        }
    };
    let mut specs: BTreeMap<usize, Vec<QuantizerSpec>> = BTreeMap::new();
    for (layer, chunks) in collected {
        if plan.layers[*layer].role != LayerRole::Hidden {
            continue;
        }
        let fitted = chunks
            .iter()
            .map(|hist| {
                let counts: Vec<(f64, u64)> =
                    hist.iter().map(|(&v, &c)| (v as f64, c)).collect();
                lloyd_max_from_counts(&counts, bits)
            })
            .collect::<Result<Vec<_>>>()?;
        specs.insert(*layer, fitted);
    }
    install_quantizers(plan, &specs)
}

/// Run the full pipeline for one configuration. Stage failures are wrapped
/// with the stage name (`ingest`, `train`, `reconstruct`, `retrain`, `plan`,
/// `quantize`, `simulate`, `power`, `export`).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let ds = load_dataset(cfg).map_err(|e| e.in_stage("ingest"))?;
    let train = TensorDataset::from_split(&ds.train, ds.classes);
    let test = TensorDataset::from_split(&ds.test, ds.classes);

    let baseline = match &cfg.model_in {
        Some(path) => load_model(path).map_err(|e| e.in_stage("train"))?,
        None => {
            train_baseline(&cfg.arch, &train, &cfg.train)
                .map_err(|e| e.in_stage("train"))?
                .0
        }
    };

    let needs_split = cfg.reconstruct || matches!(cfg.output, OutputMode::Sa1Bit);
    let mut net = if needs_split {
        reconstruct_network(&baseline, cfg.capacity, ReconstructMode::Mapped)
            .map_err(|e| e.in_stage("reconstruct"))?
    } else {
        baseline
    };
    if cfg.retrain_epochs > 0 {
        let rcfg = TrainConfig {
            epochs: cfg.retrain_epochs,
            ..cfg.train
        };
        net = retrain_split(&net, &train, &rcfg)
            .map_err(|e| e.in_stage("retrain"))?
            .0;
    }
    if let Some(path) = &cfg.model_out {
        save_model(&net, path).map_err(|e| e.in_stage("train"))?;
    }

    finish_experiment(cfg, net, &train, &test)
}

/// Mapping + simulation + power for an already-prepared network.
pub fn finish_experiment(
    cfg: &ExperimentConfig,
    net: Network,
    train: &TensorDataset,
    test: &TensorDataset,
) -> Result<ExperimentResult> {
    finish_experiment_with(cfg, net, train, test, None)
}

/// [`finish_experiment`] reusing precollected calibration histograms.
pub fn finish_experiment_with(
    cfg: &ExperimentConfig,
    net: Network,
    train: &TensorDataset,
    test: &TensorDataset,
    precollected: Option<&SumHistograms>,
) -> Result<ExperimentResult> {
    let array_cfg = cfg.array_config().map_err(|e| e.in_stage("plan"))?;
    let mut plan = plan_tiling(&net, &array_cfg).map_err(|e| e.in_stage("plan"))?;
    fit_and_install_quantizers(&net, &mut plan, train, cfg, precollected)
        .map_err(|e| e.in_stage("quantize"))?;

    let n_eval = cfg.eval_limit.unwrap_or(test.y.len()).min(test.y.len());
    let x_eval = test.x.slice(ndarray::s![..n_eval, ..]).to_owned();
    let accuracy = simulated_accuracy(&net, &plan, &x_eval, &test.y[..n_eval])
        .map_err(|e| e.in_stage("simulate"))?;
    let baseline_accuracy = {
        let (acc, _) = crate::train::evaluate(&net, &x_eval, &test.y[..n_eval], *cfg.arch.last().unwrap())
            .map_err(|e| e.in_stage("simulate"))?;
        acc
    };

    let census = count_interfaces(&plan);
    let power = estimate(&census, &PowerConfig::default()).map_err(|e| e.in_stage("power"))?;
    let row = ReportRow {
        model: cfg.model_name.clone(),
        r: cfg.capacity,
        mode: mode_name(cfg.output).to_string(),
        bits: mode_bits(cfg.output, &census),
        accuracy,
        arrays: plan.array_count,
        interface_power: power.interface_power,
        total_power: power.total_power,
        saving_vs_4bit: power.saving_vs_4bit,
        saving_vs_3bit: power.saving_vs_3bit,
    };
    let report = ExperimentReport {
        config_hash: cfg.hash(),
        seed: cfg.seed(),
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        baseline_accuracy,
        split_pattern: split_pattern(&net, cfg.capacity),
        rows: vec![row],
        census,
        power,
    };
    Ok(ExperimentResult { report, network: net, plan })
}

/// Sweep output modes over one trained network: train (or load) once per
/// `base`, then evaluate every (quantizer kind, bits) pair plus the ideal
/// mode, reusing the collected calibration sums.
pub fn run_sweep(
    base: &ExperimentConfig,
    kinds: &[QuantKind],
    bit_widths: &[u32],
) -> Result<ExperimentReport> {
    let ds = load_dataset(base).map_err(|e| e.in_stage("ingest"))?;
    let train = TensorDataset::from_split(&ds.train, ds.classes);
    let test = TensorDataset::from_split(&ds.test, ds.classes);

    let baseline = match &base.model_in {
        Some(path) => load_model(path).map_err(|e| e.in_stage("train"))?,
        None => {
            train_baseline(&base.arch, &train, &base.train)
                .map_err(|e| e.in_stage("train"))?
                .0
        }
    };
    let net = if base.reconstruct {
        reconstruct_network(&baseline, base.capacity, ReconstructMode::Mapped)
            .map_err(|e| e.in_stage("reconstruct"))?
    } else {
        baseline
    };

    let mut rows = Vec::new();
    let mut census = None;
    let mut power = None;
    let mut ideal_cfg = base.clone();
    ideal_cfg.output = OutputMode::Ideal;
    ideal_cfg.reconstruct = false;
    let ideal = finish_experiment(&ideal_cfg, net.clone(), &train, &test)?;
    let baseline_accuracy = ideal.report.baseline_accuracy;
    let split = ideal.report.split_pattern.clone();
    rows.extend(ideal.report.rows);

    // one calibration pass serves every Lloyd-Max resolution
    let calibration = if kinds.contains(&QuantKind::LloydMax) && !bit_widths.is_empty() {
        Some(
            collect_calibration_sums(&net, &ideal.plan, &train, base)
                .map_err(|e| e.in_stage("quantize"))?,
        )
    } else {
        None
    };

    for &kind in kinds {
        for &bits in bit_widths {
            let mut cfg = base.clone();
            cfg.output = OutputMode::Adc { bits };
            cfg.quantizer = kind;
            cfg.reconstruct = false;
            let mut result =
                finish_experiment_with(&cfg, net.clone(), &train, &test, calibration.as_ref())?;
            result.report.rows[0].model =
                format!("{}-{}", base.model_name, match kind {
                    QuantKind::Linear => "linear",
                    QuantKind::LloydMax => "lloyd-max",
                });
            census = Some(result.report.census.clone());
            power = Some(result.report.power.clone());
            rows.extend(result.report.rows);
        }
    }

    let (census, power) = match (census, power) {
        (Some(c), Some(p)) => (c, p),
        _ => {
            let c = count_interfaces(&ideal.plan);
            let p = estimate(&c, &PowerConfig::default()).map_err(|e| e.in_stage("power"))?;
            (c, p)
        }
    };
    Ok(ExperimentReport {
        config_hash: base.hash(),
        seed: base.seed(),
        format_version: FORMAT_VERSION,
        config: base.clone(),
        baseline_accuracy,
        split_pattern: split,
        rows,
        census,
        power,
    })
}

/// Render the report rows as CSV. Floats use shortest round-trip formatting,
/// so equal values always print identically.
pub fn report_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "model,R,mode,bits,accuracy,arrays,interface_power,total_power,saving_vs_4bit,saving_vs_3bit\n",
    );
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.model,
            row.r,
            row.mode,
            row.bits,
            row.accuracy,
            row.arrays,
            row.interface_power,
            row.total_power,
            row.saving_vs_4bit,
            row.saving_vs_3bit
        ));
    }
    out
}

pub fn report_json(report: &ExperimentReport) -> Result<String> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    Ok(json)
}

/// Write the CSV and JSON report files.
pub fn export_report(report: &ExperimentReport, csv_path: &Path, json_path: &Path) -> Result<()> {
    let write = |path: &Path, contents: &str| -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, contents)?;
        Ok(())
    };
    write(csv_path, &report_csv(report)).map_err(|e| e.in_stage("export"))?;
    write(json_path, &report_json(report)?).map_err(|e| e.in_stage("export"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_json_round_trip(cfg: &ExperimentConfig) -> ExperimentConfig {
        serde_json::from_str(&serde_json::to_string(cfg).unwrap()).unwrap()
    }

    #[test]
    fn config_round_trips_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        let back = config_json_round_trip(&cfg);
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        let mut other = cfg.clone();
        other.capacity = 128;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"capacity": 128, "output": {"mode": "ideal"}}"#).unwrap();
        assert_eq!(cfg.capacity, 128);
        assert_eq!(cfg.output, OutputMode::Ideal);
        assert_eq!(cfg.arch, vec![784, 1024, 1024, 10]);
        assert_eq!(cfg.quant_fit_samples, 10_000);
    }

    #[test]
    fn array_config_matches_capacity_in_both_cell_modes() {
        for (mode, r) in [(CellMode::A, 256), (CellMode::B, 128)] {
            let cfg = ExperimentConfig {
                cell_mode: mode,
                capacity: r,
                ..ExperimentConfig::default()
            };
            assert_eq!(cfg.array_config().unwrap().input_capacity(), r);
        }
    }

    #[test]
    fn csv_is_deterministic_and_round_trips_through_json() {
        let report = ExperimentReport {
            config_hash: "abc".into(),
            seed: 42,
            format_version: FORMAT_VERSION,
            config: ExperimentConfig::default(),
            baseline_accuracy: 0.97,
            split_pattern: vec![None, Some(4), Some(4), None],
            rows: vec![ReportRow {
                model: "mnist-mlp".into(),
                r: 256,
                mode: "sa-1bit".into(),
                bits: 1,
                accuracy: 0.9685,
                arrays: 52,
                interface_power: 0.0,
                total_power: 419.12,
                saving_vs_4bit: 0.933_333_333,
                saving_vs_3bit: 0.857_142_857,
            }],
            census: InterfaceCensus {
                array_count: 52,
                sa_count: 48,
                adc_counts: BTreeMap::new(),
            },
            power: estimate(
                &InterfaceCensus {
                    array_count: 52,
                    sa_count: 48,
                    adc_counts: BTreeMap::new(),
                },
                &PowerConfig::default(),
            )
            .unwrap(),
        };
        let csv1 = report_csv(&report);
        let csv2 = report_csv(&report);
        assert_eq!(csv1, csv2);
        // every CSV value survives the JSON report unchanged
        let json: serde_json::Value = serde_json::from_str(&report_json(&report).unwrap()).unwrap();
        let row = &json["rows"][0];
        let fields: Vec<&str> = csv1.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(fields[0], row["model"].as_str().unwrap());
        assert_eq!(fields[1].parse::<u64>().unwrap(), row["r"].as_u64().unwrap());
        assert_eq!(fields[2], row["mode"].as_str().unwrap());
        assert_eq!(fields[3].parse::<u64>().unwrap(), row["bits"].as_u64().unwrap());
        assert_eq!(fields[4].parse::<f64>().unwrap(), row["accuracy"].as_f64().unwrap());
        assert_eq!(fields[7].parse::<f64>().unwrap(), row["total_power"].as_f64().unwrap());
    }

    #[test]
    fn sa_row_reports_one_bit_and_zero_adcs() {
        let census = InterfaceCensus {
            array_count: 10,
            sa_count: 8,
            adc_counts: BTreeMap::new(),
        };
        assert_eq!(mode_bits(OutputMode::Sa1Bit, &census), 1);
        assert_eq!(census.total_adcs(), 0);
    }

    #[test]
    fn data_root_resolution_prefers_explicit_path() {
        let cfg = ExperimentConfig {
            data_root: Some(PathBuf::from("/elsewhere/mnist")),
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.resolved_data_root(), PathBuf::from("/elsewhere/mnist"));
        let cfg = ExperimentConfig {
            data_root: None,
            ..ExperimentConfig::default()
        };
        // without the env var the default is ./data/mnist
        if std::env::var_os(DATA_ROOT_ENV).is_none() {
            assert_eq!(cfg.resolved_data_root(), PathBuf::from("data/mnist"));
        }
    }
}
