//! Synthetic federated dataset generator and dataset partitioners.
//!
//! Each device draws features from its own Gaussian: the device mean vector
//! v_k has elements ~ N(B_k, 1) with B_k ~ N(0, gamma1), and samples are
//! N(v_k, Sigma) with the fixed diagonal covariance Sigma_jj = j^-1.2.
//! Labels come from a frozen two-layer perceptron whose weights are
//! N(u_k, 1) with u_k ~ N(0, gamma2). gamma1 spreads the per-device feature
//! distributions, gamma2 spreads the per-device labeling rules; (0, 0) still
//! yields heterogeneous devices through the unit-variance draws.
//!
//! Throughout, N(m, v) is parameterized by mean and variance; draws go
//! through the seeded `Rng` with std = sqrt(v).
//!
//! Externally supplied datasets enter as CSV (`label,f0,f1,...`) and are
//! split across devices either IID or by class assignment.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MlpDims, MlpModel};
use crate::numerics::{sample_gaussian, Rng, Tensor2D};

/// Attempts at drawing a feasible class-to-device assignment before giving
/// up.
const NONIID_MAX_RETRIES: usize = 1000;

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub gamma1: f64,
    pub gamma2: f64,
    pub num_devices: usize,
    pub samples_per_device: usize,
    /// Held-out samples drawn per device and pooled into the global test
    /// set.
    pub test_samples_per_device: usize,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Use one frozen label perceptron for every device instead of one per
    /// device (ablation switch; per-device is what makes gamma2 a
    /// heterogeneity knob).
    pub shared_label_generator: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            gamma1: 0.0,
            gamma2: 0.0,
            num_devices: 20,
            samples_per_device: 200,
            test_samples_per_device: 50,
            in_dim: 1024,
            hidden_dim: 512,
            num_classes: 10,
            seed: 42,
            shared_label_generator: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::config("gamma1 and gamma2 must be >= 0"));
        }
        if self.num_devices == 0
            || self.samples_per_device == 0
            || self.in_dim == 0
            || self.hidden_dim == 0
            || self.num_classes == 0
        {
            return Err(Error::config("synthetic spec counts must be positive"));
        }
        Ok(())
    }
}

/// One device's local dataset.
#[derive(Debug, Clone)]
pub struct DeviceShard {
    pub device_id: usize,
    pub samples: Tensor2D,
    pub labels: Vec<usize>,
}

impl DeviceShard {
    pub fn n_k(&self) -> usize {
        self.labels.len()
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut hist = vec![0usize; num_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}

/// A labeled vector dataset (the pool a partitioner splits, or a test set).
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Tensor2D,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Frozen label perceptron. Once built its weights never change, so repeated
/// labelings of the same features agree.
#[derive(Debug, Clone)]
pub struct LabelGenerator {
    model: MlpModel,
}

impl LabelGenerator {
    pub fn from_model(model: MlpModel) -> Self {
        LabelGenerator { model }
    }

    pub fn dims(&self) -> MlpDims {
        self.model.dims()
    }

    /// argmax of the frozen perceptron's logits per sample; ties resolve to
    /// the lowest class index.
    pub fn labels_for(&self, features: &Tensor2D) -> Result<Vec<usize>> {
        let trace = self.model.forward(features.clone())?;
        let logits = trace.logits();
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Diagonal covariance entries: entry j (1-indexed) is j^-1.2, strictly
/// decreasing.
pub fn make_covariance(in_dim: usize) -> Vec<f64> {
    (1..=in_dim).map(|j| (j as f64).powf(-1.2)).collect()
}

/// Per-device feature distribution: the mean vector v_k (and the B_k it was
/// centered on, kept for tests).
pub(crate) struct DeviceDistribution {
    #[allow(dead_code)]
    pub b_k: f64,
    pub v_k: Vec<f64>,
}

pub(crate) fn draw_device_distribution(spec: &SyntheticSpec, rng: &mut Rng) -> DeviceDistribution {
    let b_k = rng.gaussian(0.0, spec.gamma1.sqrt());
    let v_k = (0..spec.in_dim).map(|_| rng.gaussian(b_k, 1.0)).collect();
    DeviceDistribution { b_k, v_k }
}

fn sample_features(
    dist: &DeviceDistribution,
    cov_std: &[f64],
    rng: &mut Rng,
    n: usize,
) -> Tensor2D {
    let mut out = Tensor2D::zeros(n, dist.v_k.len());
    for r in 0..n {
        for (x, (&mean, &std)) in out.row_mut(r).iter_mut().zip(dist.v_k.iter().zip(cov_std)) {
            *x = rng.gaussian(mean, std);
        }
    }
    out
}

/// Feature matrix for device k: draws B_k, then v_k, then
/// `samples_per_device` rows of N(v_k, Sigma).
pub fn generate_device_features(spec: &SyntheticSpec, rng: &mut Rng) -> Tensor2D {
    let dist = draw_device_distribution(spec, rng);
    let cov_std: Vec<f64> = make_covariance(spec.in_dim)
        .iter()
        .map(|v| v.sqrt())
        .collect();
    sample_features(&dist, &cov_std, rng, spec.samples_per_device)
}

/// Frozen label perceptron for device k: u_k ~ N(0, gamma2) drawn once, then
/// every weight and bias element ~ N(u_k, 1).
pub fn make_label_generator(spec: &SyntheticSpec, rng: &mut Rng) -> LabelGenerator {
    let (u_k, model) = draw_label_generator(spec, rng);
    let _ = u_k;
    LabelGenerator { model }
}

pub(crate) fn draw_label_generator(spec: &SyntheticSpec, rng: &mut Rng) -> (f64, MlpModel) {
    let u_k = rng.gaussian(0.0, spec.gamma2.sqrt());
    let w1 = sample_gaussian(rng, u_k, 1.0, spec.hidden_dim, spec.in_dim);
    let b1: Vec<f64> = (0..spec.hidden_dim)
        .map(|_| rng.gaussian(u_k, 1.0))
        .collect();
    let w2 = sample_gaussian(rng, u_k, 1.0, spec.num_classes, spec.hidden_dim);
    let b2: Vec<f64> = (0..spec.num_classes)
        .map(|_| rng.gaussian(u_k, 1.0))
        .collect();
    let model = MlpModel::from_parts(w1, b1, w2, b2).expect("shapes consistent by construction");
    (u_k, model)
}

/// Labels for a feature matrix under a frozen generator.
pub fn generate_device_labels(
    features: &Tensor2D,
    generator: &LabelGenerator,
) -> Result<Vec<usize>> {
    if features.cols() != generator.dims().in_dim {
        return Err(Error::contract(format!(
            "label generator expects {} features, got {}",
            generator.dims().in_dim,
            features.cols()
        )));
    }
    generator.labels_for(features)
}

/// Synthetic training shards plus a pooled held-out test set.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub shards: Vec<DeviceShard>,
    pub testset: LabeledDataset,
}

/// Full synthetic federation: per-device distributions, frozen label
/// generators, train shards and pooled test samples, all from one sequential
/// RNG lineage so (spec, seed) fully determines the output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = Rng::new(crate::numerics::derive_seed(spec.seed, &[0x5da7a]));
    let cov_std: Vec<f64> = make_covariance(spec.in_dim)
        .iter()
        .map(|v| v.sqrt())
        .collect();

    let shared = spec
        .shared_label_generator
        .then(|| make_label_generator(spec, &mut rng));

    let mut shards = Vec::with_capacity(spec.num_devices);
    let mut test_features: Vec<Tensor2D> = Vec::new();
    let mut test_labels: Vec<usize> = Vec::new();

    for device_id in 0..spec.num_devices {
        let generator = match &shared {
            Some(g) => g.clone(),
            None => make_label_generator(spec, &mut rng),
        };
        let dist = draw_device_distribution(spec, &mut rng);
        let train = sample_features(&dist, &cov_std, &mut rng, spec.samples_per_device);
        let labels = generate_device_labels(&train, &generator)?;
        if spec.test_samples_per_device > 0 {
            let test = sample_features(&dist, &cov_std, &mut rng, spec.test_samples_per_device);
            test_labels.extend(generate_device_labels(&test, &generator)?);
            test_features.push(test);
        }
        shards.push(DeviceShard {
            device_id,
            samples: train,
            labels,
        });
    }

    let total_test: usize = test_features.iter().map(|t| t.rows()).sum();
    let mut features = Tensor2D::zeros(total_test, spec.in_dim);
    let mut row = 0;
    for block in &test_features {
        for r in 0..block.rows() {
            features.row_mut(row).copy_from_slice(block.row(r));
            row += 1;
        }
    }

    Ok(SyntheticData {
        shards,
        testset: LabeledDataset {
            features,
            labels: test_labels,
            num_classes: spec.num_classes,
        },
    })
}

/// Random permutation split into `num_devices` near-equal shards; every
/// sample lands in exactly one shard.
pub fn partition_iid(
    dataset: &LabeledDataset,
    num_devices: usize,
    rng: &mut Rng,
) -> Result<Vec<DeviceShard>> {
    if dataset.is_empty() {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    if num_devices == 0 || num_devices > dataset.len() {
        return Err(Error::config(format!(
            "cannot split {} samples across {num_devices} devices",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);

    let base = dataset.len() / num_devices;
    let extra = dataset.len() % num_devices;
    let mut shards = Vec::with_capacity(num_devices);
    let mut cursor = 0;
    for device_id in 0..num_devices {
        let take = base + usize::from(device_id < extra);
        let idx = &order[cursor..cursor + take];
        cursor += take;
        shards.push(DeviceShard {
            device_id,
            samples: dataset.features.gather_rows(idx),
            labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
        });
    }
    Ok(shards)
}

/// Class-skewed split: each device is assigned `classes_per_device` distinct
/// classes and each class's samples are divided evenly (remainder
/// round-robin) among the devices holding that class. Draws assignments
/// until every present class has a holder and every device ends up
/// non-empty.
pub fn partition_noniid_by_class(
    dataset: &LabeledDataset,
    num_devices: usize,
    classes_per_device: usize,
    rng: &mut Rng,
) -> Result<Vec<DeviceShard>> {
    if dataset.is_empty() {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    if num_devices == 0 {
        return Err(Error::config("need at least one device"));
    }
    if classes_per_device == 0 || classes_per_device > dataset.num_classes {
        return Err(Error::config(format!(
            "classes_per_device {} out of range for {} classes",
            classes_per_device, dataset.num_classes
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let present: Vec<usize> = (0..dataset.num_classes)
        .filter(|&c| !by_class[c].is_empty())
        .collect();

    'attempt: for _ in 0..NONIID_MAX_RETRIES {
        // Each device picks its classes uniformly.
        let assignment: Vec<Vec<usize>> = (0..num_devices)
            .map(|_| rng.sample_distinct(classes_per_device, dataset.num_classes))
            .collect();

        let mut holders: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
        for (device, classes) in assignment.iter().enumerate() {
            for &c in classes {
                holders[c].push(device);
            }
        }
        if present.iter().any(|&c| holders[c].is_empty()) {
            continue 'attempt;
        }

        let mut per_device: Vec<Vec<usize>> = vec![Vec::new(); num_devices];
        for &c in &present {
            let mut pool = by_class[c].clone();
            rng.shuffle(&mut pool);
            let devs = &holders[c];
            let base = pool.len() / devs.len();
            let extra = pool.len() % devs.len();
            let mut cursor = 0;
            for (slot, &device) in devs.iter().enumerate() {
                let take = base + usize::from(slot < extra);
                per_device[device].extend_from_slice(&pool[cursor..cursor + take]);
                cursor += take;
            }
        }
        if per_device.iter().any(|ids| ids.is_empty()) {
            continue 'attempt;
        }

        return Ok(per_device
            .into_iter()
            .enumerate()
            .map(|(device_id, idx)| DeviceShard {
                device_id,
                samples: dataset.features.gather_rows(&idx),
                labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
            })
            .collect());
    }

    Err(Error::config(format!(
        "no feasible class assignment after {NONIID_MAX_RETRIES} draws \
         ({num_devices} devices x {classes_per_device} classes cannot cover \
         {} present classes with non-empty devices)",
        present.len()
    )))
}

/// Random split into (train, test) with `test_frac` of the samples held out.
pub fn train_test_split(
    dataset: &LabeledDataset,
    test_frac: f64,
    rng: &mut Rng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&test_frac) {
        return Err(Error::config(format!(
            "test fraction must be in [0, 1), got {test_frac}"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    let n_test = ((dataset.len() as f64) * test_frac).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| LabeledDataset {
        features: dataset.features.gather_rows(idx),
        labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
        num_classes: dataset.num_classes,
    };
    Ok((pick(train_idx), pick(test_idx)))
}

/// Read a `label,f0,f1,...` CSV with a header row. Labels are 0-based
/// integers; the class count is max(label) + 1.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    if !header.starts_with("label,") {
        return Err(Error::parse(path, "expected header starting with 'label,'"));
    }
    let width = header.split(',').count() - 1;
    if width == 0 {
        return Err(Error::parse(path, "no feature columns"));
    }

    let mut labels = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad label", lineno + 2)))?;
        let mut count = 0;
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad value '{f}'", lineno + 2)))?;
            values.push(v);
            count += 1;
        }
        if count != width {
            return Err(Error::parse(
                path,
                format!(
                    "line {}: expected {width} features, found {count}",
                    lineno + 2
                ),
            ));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::parse(path, "no data rows"));
    }
    let num_classes = labels.iter().copied().max().unwrap() + 1;
    Ok(LabeledDataset {
        features: Tensor2D::from_vec(labels.len(), width, values)?,
        labels,
        num_classes,
    })
}

/// Write a dataset in the same CSV layout `load_csv` reads.
pub fn write_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    let mut header = String::from("label");
    for j in 0..dataset.features.cols() {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{header}").map_err(io_err)?;
    for (r, &label) in dataset.labels.iter().enumerate() {
        let mut line = label.to_string();
        for v in dataset.features.row(r) {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Emit the per-device audit manifest: sample count and class histogram for
/// every shard, keyed by device id.
pub fn write_shard_manifest(shards: &[DeviceShard], num_classes: usize, path: &Path) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Entry {
        n_k: usize,
        class_histogram: BTreeMap<usize, usize>,
    }
    let manifest: BTreeMap<usize, Entry> = shards
        .iter()
        .map(|s| {
            let hist = s
                .class_histogram(num_classes)
                .into_iter()
                .enumerate()
                .filter(|(_, n)| *n > 0)
                .collect();
            (
                s.device_id,
                Entry {
                    n_k: s.n_k(),
                    class_histogram: hist,
                },
            )
        })
        .collect();
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::parse(path, format!("serialize: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}
