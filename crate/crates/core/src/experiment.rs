//! Run orchestration: a fully resolved run configuration, the flat
//! key=value config-file format, and the output files every run emits
//! (metrics CSV, shard manifest JSON, run summary JSON, optional activation
//! export and model checkpoint).

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Serialize, Serializer};

use crate::analysis::{
    export_activations, run_beta_sweep, write_metrics_csv, write_sweep_csv, SweepSpec,
};
use crate::datagen::{
    generate_synthetic, load_csv, partition_iid, partition_noniid_by_class, train_test_split,
    write_shard_manifest, DeviceShard, LabeledDataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::federation::{run_federation, FederationConfig, SimilarityScope};
use crate::numerics::{derive_seed, Rng};
use crate::objectives::{EntropyForm, LocalObjective, ObjectiveKind};

const SPLIT_STREAM: u64 = 0x10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Synthetic => f.write_str("synthetic"),
            DataSource::Csv(p) => write!(f, "csv:{}", p.display()),
        }
    }
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            Ok(DataSource::Synthetic)
        } else if let Some(path) = s.strip_prefix("csv:") {
            Ok(DataSource::Csv(PathBuf::from(path)))
        } else {
            Err(Error::config(format!(
                "unknown data source '{s}' (expected synthetic or csv:<path>)"
            )))
        }
    }
}

impl Serialize for DataSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    Iid,
    NonIid(usize),
}

impl std::fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionScheme::Iid => f.write_str("iid"),
            PartitionScheme::NonIid(k) => write!(f, "noniid:{k}"),
        }
    }
}

impl std::str::FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "iid" {
            Ok(PartitionScheme::Iid)
        } else if let Some(k) = s.strip_prefix("noniid:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::config(format!("bad classes_per_device in '{s}'")))?;
            Ok(PartitionScheme::NonIid(k))
        } else {
            Err(Error::config(format!(
                "unknown partition '{s}' (expected iid or noniid:<classes_per_device>)"
            )))
        }
    }
}

impl Serialize for PartitionScheme {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// Every knob of a run, defaults made explicit. The summary JSON embeds the
/// whole struct so any output file can be traced back to its inputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    // Algorithm.
    pub algo: ObjectiveKind,
    pub beta: f64,
    pub mu: f64,
    pub entropy_form: EntropyForm,
    // Federation schedule.
    pub rounds: usize,
    pub local_epochs: usize,
    pub clients_frac: f64,
    pub devices: usize,
    pub batch_size: usize,
    pub eta0: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub similarity_scope: SimilarityScope,
    pub eval_stride: usize,
    pub log_delta_k: bool,
    pub hidden_dim: usize,
    // Data.
    pub data: DataSource,
    pub gamma1: f64,
    pub gamma2: f64,
    pub samples_per_device: usize,
    pub test_samples_per_device: usize,
    pub in_dim: usize,
    pub num_classes: usize,
    pub shared_label_generator: bool,
    pub partition: PartitionScheme,
    pub test_frac: f64,
    // Outputs.
    pub out: PathBuf,
    pub export_activations: bool,
    pub save_model: bool,
    // Sweep mode (active when the beta grid is non-empty).
    pub sweep_betas: Vec<f64>,
    pub sweep_seeds: usize,
    pub sweep_rounds: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algo: ObjectiveKind::FedAvg,
            beta: 0.0,
            mu: 0.0,
            entropy_form: EntropyForm::NegEntropy,
            rounds: 200,
            local_epochs: 1,
            clients_frac: 1.0,
            devices: 20,
            batch_size: 50,
            eta0: 0.01,
            lr_decay: 1.0,
            seed: 42,
            similarity_scope: SimilarityScope::All,
            eval_stride: 1,
            log_delta_k: false,
            hidden_dim: 512,
            data: DataSource::Synthetic,
            gamma1: 0.0,
            gamma2: 0.0,
            samples_per_device: 200,
            test_samples_per_device: 50,
            in_dim: 1024,
            num_classes: 10,
            shared_label_generator: false,
            partition: PartitionScheme::Iid,
            test_frac: 0.2,
            out: PathBuf::from("out"),
            export_activations: false,
            save_model: false,
            sweep_betas: Vec::new(),
            sweep_seeds: 1,
            sweep_rounds: None,
        }
    }
}

impl RunConfig {
    /// Apply one key=value pair (config-file line or CLI override).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "algo" => self.algo = value.parse()?,
            "beta" => self.beta = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "entropy_form" => {
                self.entropy_form = match value {
                    "neg_entropy" => EntropyForm::NegEntropy,
                    "kl_uniform" => EntropyForm::KlUniform,
                    _ => {
                        return Err(Error::config(format!(
                            "bad entropy_form '{value}' (expected neg_entropy|kl_uniform)"
                        )))
                    }
                }
            }
            "rounds" => self.rounds = parse(key, value)?,
            "local_epochs" => self.local_epochs = parse(key, value)?,
            "clients_frac" => self.clients_frac = parse(key, value)?,
            "devices" => self.devices = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eta0" => self.eta0 = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "similarity_scope" => self.similarity_scope = value.parse()?,
            "eval_stride" => self.eval_stride = parse(key, value)?,
            "log_delta_k" => self.log_delta_k = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "data" => self.data = value.parse()?,
            "gamma1" => self.gamma1 = parse(key, value)?,
            "gamma2" => self.gamma2 = parse(key, value)?,
            "samples_per_device" => self.samples_per_device = parse(key, value)?,
            "test_samples_per_device" => self.test_samples_per_device = parse(key, value)?,
            "in_dim" => self.in_dim = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "shared_label_generator" => self.shared_label_generator = parse(key, value)?,
            "partition" => self.partition = value.parse()?,
            "test_frac" => self.test_frac = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "export_activations" => self.export_activations = parse(key, value)?,
            "save_model" => self.save_model = parse(key, value)?,
            "sweep_betas" => {
                self.sweep_betas = value
                    .split(',')
                    .filter(|t| !t.is_empty())
                    .map(|t| parse::<f64>(key, t))
                    .collect::<Result<_>>()?;
            }
            "sweep_seeds" => self.sweep_seeds = parse(key, value)?,
            "sweep_rounds" => self.sweep_rounds = Some(parse(key, value)?),
            other => {
                return Err(Error::config(format!(
                    "unknown configuration key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Merge a flat key=value file (# starts a comment).
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(path, format!("line {}: expected key=value", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())
                .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<LocalObjective> {
        let objective = LocalObjective {
            kind: self.algo,
            beta: self.beta,
            mu: self.mu,
            entropy_form: self.entropy_form,
        };
        objective.validate()?;
        Ok(objective)
    }

    pub fn federation_config(&self) -> Result<FederationConfig> {
        let config = FederationConfig {
            num_devices: self.devices,
            client_fraction: self.clients_frac,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            eta0: self.eta0,
            lr_decay: self.lr_decay,
            objective: self.objective()?,
            seed: self.seed,
            similarity_scope: self.similarity_scope,
            hidden_dim: self.hidden_dim,
            eval_stride: self.eval_stride,
            log_delta_k: self.log_delta_k,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            num_devices: self.devices,
            samples_per_device: self.samples_per_device,
            test_samples_per_device: self.test_samples_per_device,
            in_dim: self.in_dim,
            hidden_dim: self.hidden_dim,
            num_classes: self.num_classes,
            seed: self.seed,
            shared_label_generator: self.shared_label_generator,
        }
    }

    /// Materialize training shards and the test set from the configured
    /// source.
    pub fn build_data(&self) -> Result<(Vec<DeviceShard>, LabeledDataset)> {
        match &self.data {
            DataSource::Synthetic => {
                let data = generate_synthetic(&self.synthetic_spec())?;
                Ok((data.shards, data.testset))
            }
            DataSource::Csv(path) => {
                let full = load_csv(path)?;
                let mut rng = Rng::new(derive_seed(self.seed, &[SPLIT_STREAM]));
                let (train, test) = train_test_split(&full, self.test_frac, &mut rng)?;
                let shards = match self.partition {
                    PartitionScheme::Iid => partition_iid(&train, self.devices, &mut rng)?,
                    PartitionScheme::NonIid(k) => {
                        partition_noniid_by_class(&train, self.devices, k, &mut rng)?
                    }
                };
                Ok((shards, test))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalMetrics {
    pub round: usize,
    pub mean_train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub delta_bar: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCellSummary {
    pub beta: f64,
    pub n_seeds: usize,
    pub mean_final_accuracy: f64,
    pub sd_final_accuracy: f64,
    pub status: String,
}

/// Metric conventions recorded with every run so downstream consumers do not
/// have to guess.
#[derive(Debug, Clone, Serialize)]
pub struct Conventions {
    /// Classes with zero true and zero predicted samples contribute this F1.
    pub macro_f1_zero_support: f64,
    /// Floor applied inside the divergence KL.
    pub kl_epsilon_floor: f64,
    /// Entropy and KL use the natural logarithm.
    pub log_base: &'static str,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            macro_f1_zero_support: 0.0,
            kl_epsilon_floor: 1e-12,
            log_base: "natural",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub total_train_samples: usize,
    pub test_samples: usize,
    pub final_metrics: Option<FinalMetrics>,
    pub sweep: Option<Vec<SweepCellSummary>>,
    pub conventions: Conventions,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

/// Execute a full run (or sweep) and write every output file into
/// `config.out`. Returns the summary that was written to `summary.json`.
pub fn execute(config: &RunConfig) -> Result<RunSummary> {
    let start = Instant::now();
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;

    let (shards, testset) = config.build_data()?;
    let mut outputs = Vec::new();

    let manifest_path = config.out.join("shards.json");
    write_shard_manifest(&shards, testset.num_classes, &manifest_path)?;
    outputs.push("shards.json".to_string());

    let mut final_metrics = None;
    let mut sweep_summary = None;

    if config.sweep_betas.is_empty() {
        let fed = config.federation_config()?;
        let run = run_federation(&fed, &shards, &testset)?;

        let metrics_path = config.out.join("metrics.csv");
        write_metrics_csv(&run.records, &metrics_path)?;
        outputs.push("metrics.csv".to_string());

        if config.export_activations {
            let path = config.out.join("activations.csv");
            export_activations(run.final_model(), &shards, &path)?;
            outputs.push("activations.csv".to_string());
        }
        if config.save_model {
            let path = config.out.join("model.txt");
            run.final_model().save(&path)?;
            outputs.push("model.txt".to_string());
        }

        let last = run.records.last().expect("at least one round");
        final_metrics = Some(FinalMetrics {
            round: last.round,
            mean_train_loss: last.mean_train_loss,
            test_accuracy: last.test_accuracy,
            macro_f1: last.macro_f1,
            delta_bar: last.delta_bar,
        });
    } else {
        let base = config.federation_config()?;
        let sweep = SweepSpec {
            kind: config.algo,
            betas: config.sweep_betas.clone(),
            rounds: config.sweep_rounds.unwrap_or(config.rounds),
            seeds: (0..config.sweep_seeds as u64)
                .map(|i| config.seed + i)
                .collect(),
        };
        let cells = run_beta_sweep(&sweep, &base, &shards, &testset)?;
        let path = config.out.join("sweep.csv");
        write_sweep_csv(&cells, &path)?;
        outputs.push("sweep.csv".to_string());
        sweep_summary = Some(
            cells
                .iter()
                .map(|c| SweepCellSummary {
                    beta: c.beta,
                    n_seeds: c.per_seed.len(),
                    mean_final_accuracy: c.mean_final_accuracy,
                    sd_final_accuracy: c.sd_final_accuracy,
                    status: c.error.clone().unwrap_or_else(|| "ok".to_string()),
                })
                .collect(),
        );
    }

    let summary = RunSummary {
        config: config.clone(),
        total_train_samples: shards.iter().map(|s| s.n_k()).sum(),
        test_samples: testset.len(),
        final_metrics,
        sweep: sweep_summary,
        conventions: Conventions::default(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs: outputs.clone(),
    };

    let summary_path = config.out.join("summary.json");
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::parse(&summary_path, format!("serialize: {e}")))?;
    std::fs::write(&summary_path, json + "\n").map_err(|e| Error::io(&summary_path, e))?;

    Ok(summary)
}
