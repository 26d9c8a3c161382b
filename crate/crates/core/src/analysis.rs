//! Activation-divergence tracking, evaluation metrics, activation export and
//! the beta-sweep harness.
//!
//! The divergence statistic: for each device k, softmax every sample's
//! activation vector and average over the device's shard to get a_k; the
//! global reference is the plain mean over devices, and
//! delta_k = KL(mean || a_k). delta_bar is the mean of the delta_k.

use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::datagen::{argmax, DeviceShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::federation::{run_federation, FederationConfig, RoundRecord, SimilarityScope};
use crate::model::MlpModel;
use crate::numerics::kl_divergence;
use crate::objectives::{LocalObjective, ObjectiveKind};

/// Floor applied to mean-activation entries before KL so saturated softmax
/// outputs cannot produce an unsupported divergence.
const KL_EPSILON_FLOOR: f64 = 1e-12;

/// Rows per forward batch during evaluation and export.
const EVAL_CHUNK: usize = 256;

/// Per-round similarity snapshot.
#[derive(Debug, Clone)]
pub struct SimilarityRecord {
    pub round: usize,
    pub delta_k: Vec<f64>,
    pub delta_bar: f64,
    pub scope: SimilarityScope,
}

/// Mean softmaxed activation of a device's shard under the given model,
/// renormalized to sum exactly to 1.
pub fn device_mean_activation(model: &MlpModel, shard: &DeviceShard) -> Result<Vec<f64>> {
    if shard.n_k() == 0 {
        return Err(Error::contract(format!(
            "device {}: cannot average activations of an empty shard",
            shard.device_id
        )));
    }
    let hidden = model.dims().hidden_dim;
    let mut acc = vec![0.0f64; hidden];
    let mut start = 0;
    while start < shard.n_k() {
        let end = (start + EVAL_CHUNK).min(shard.n_k());
        let idx: Vec<usize> = (start..end).collect();
        let trace = model.forward(shard.samples.gather_rows(&idx))?;
        let s = trace.softmax_activations();
        for r in 0..s.rows() {
            for (a, v) in acc.iter_mut().zip(s.row(r)) {
                *a += v;
            }
        }
        start = end;
    }
    let inv = 1.0 / shard.n_k() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    renormalize(&mut acc);
    Ok(acc)
}

fn renormalize(p: &mut [f64]) {
    let sum: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= sum;
    }
}

/// delta_k and delta_bar from already-computed per-device mean activations.
/// Entries are floored at 1e-12 (then renormalized) before KL, and each
/// delta_k is clamped at zero against rounding.
pub fn similarity_from_mean_activations(mean_acts: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let m = mean_acts.len();
    if m == 0 {
        return Err(Error::contract("similarity of an empty device set"));
    }
    let d = mean_acts[0].len();
    if mean_acts.iter().any(|a| a.len() != d) {
        return Err(Error::contract("mean activations differ in dimension"));
    }

    let mut global = vec![0.0f64; d];
    for a in mean_acts {
        for (g, v) in global.iter_mut().zip(a) {
            *g += v;
        }
    }
    for g in &mut global {
        *g /= m as f64;
    }
    floor_and_renormalize(&mut global);

    let mut delta_k = Vec::with_capacity(m);
    for a in mean_acts {
        let mut q = a.clone();
        floor_and_renormalize(&mut q);
        let kl = kl_divergence(&global, &q)?;
        delta_k.push(kl.max(0.0));
    }
    let delta_bar = delta_k.iter().sum::<f64>() / m as f64;
    Ok((delta_k, delta_bar))
}

fn floor_and_renormalize(p: &mut [f64]) {
    for v in p.iter_mut() {
        if *v < KL_EPSILON_FLOOR {
            *v = KL_EPSILON_FLOOR;
        }
    }
    renormalize(p);
}

/// Compute the similarity record for one round. `models[i]` is the model
/// whose activations device `shards[i]` is evaluated under; the two slices
/// run in parallel.
pub fn similarity_round(
    round: usize,
    models: &[&MlpModel],
    shards: &[&DeviceShard],
    scope: SimilarityScope,
) -> Result<SimilarityRecord> {
    if models.is_empty() || models.len() != shards.len() {
        return Err(Error::contract(format!(
            "similarity_round: {} models vs {} shards",
            models.len(),
            shards.len()
        )));
    }
    let mean_acts: Vec<Vec<f64>> = models
        .par_iter()
        .zip(shards.par_iter())
        .map(|(m, s)| device_mean_activation(m, s))
        .collect::<Result<_>>()?;
    let (delta_k, delta_bar) = similarity_from_mean_activations(&mean_acts)?;
    Ok(SimilarityRecord {
        round,
        delta_k,
        delta_bar,
        scope,
    })
}

/// Predicted class per test row (argmax over logits, ties to the lowest
/// index), evaluated in fixed-size chunks.
pub fn predictions(model: &MlpModel, features: &crate::numerics::Tensor2D) -> Result<Vec<usize>> {
    let n = features.rows();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(n)))
        .collect();
    let per_chunk: Vec<Vec<usize>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let idx: Vec<usize> = (start..end).collect();
            let trace = model.forward(features.gather_rows(&idx))?;
            let logits = trace.logits();
            Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Fraction of test samples whose argmax prediction matches the label.
pub fn accuracy(model: &MlpModel, testset: &LabeledDataset) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::contract("accuracy of an empty test set"));
    }
    let preds = predictions(model, &testset.features)?;
    Ok(accuracy_from_predictions(&preds, &testset.labels))
}

pub fn accuracy_from_predictions(preds: &[usize], labels: &[usize]) -> f64 {
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Unweighted mean over classes of per-class F1 = 2TP / (2TP + FP + FN).
/// Classes with no true and no predicted samples contribute 0.
pub fn macro_f1(model: &MlpModel, testset: &LabeledDataset) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::contract("macro_f1 of an empty test set"));
    }
    let preds = predictions(model, &testset.features)?;
    Ok(macro_f1_from_predictions(
        &preds,
        &testset.labels,
        testset.num_classes,
    ))
}

pub fn macro_f1_from_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom > 0 {
            total += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    total / num_classes as f64
}

/// Accuracy and macro-F1 from a single forward pass over the test set.
pub fn evaluate(model: &MlpModel, testset: &LabeledDataset) -> Result<(f64, f64)> {
    if testset.is_empty() {
        return Err(Error::contract("evaluate on an empty test set"));
    }
    let preds = predictions(model, &testset.features)?;
    Ok((
        accuracy_from_predictions(&preds, &testset.labels),
        macro_f1_from_predictions(&preds, &testset.labels, testset.num_classes),
    ))
}

/// Dump raw (pre-softmax) activation vectors for every sample of every
/// shard: `device_id,label,a_0..a_{d-1}`, one row per sample. Lossless via
/// shortest-roundtrip float formatting; external embedding tools take it
/// from here.
pub fn export_activations(model: &MlpModel, shards: &[DeviceShard], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    let hidden = model.dims().hidden_dim;
    let mut header = String::from("device_id,label");
    for j in 0..hidden {
        header.push_str(&format!(",a_{j}"));
    }
    writeln!(w, "{header}").map_err(io_err)?;

    for shard in shards {
        let mut start = 0;
        while start < shard.n_k() {
            let end = (start + EVAL_CHUNK).min(shard.n_k());
            let idx: Vec<usize> = (start..end).collect();
            let trace = model.forward(shard.samples.gather_rows(&idx))?;
            let act = trace.activation();
            for r in 0..act.rows() {
                let mut line = format!("{},{}", shard.device_id, shard.labels[start + r]);
                for v in act.row(r) {
                    line.push(',');
                    line.push_str(&format!("{v}"));
                }
                writeln!(w, "{line}").map_err(io_err)?;
            }
            start = end;
        }
    }
    w.flush().map_err(io_err)
}

/// Write the per-round metrics table. Columns:
/// `round,eta,mean_train_loss,test_accuracy,macro_f1,delta_bar[,delta_k...]`.
/// Rounds without an evaluation leave accuracy/F1 empty.
pub fn write_metrics_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    let delta_cols = records
        .first()
        .and_then(|r| r.delta_k.as_ref())
        .map(|dk| dk.len())
        .unwrap_or(0);
    let mut header = String::from("round,eta,mean_train_loss,test_accuracy,macro_f1,delta_bar");
    for k in 0..delta_cols {
        header.push_str(&format!(",delta_{k}"));
    }
    writeln!(w, "{header}").map_err(io_err)?;

    for rec in records {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut line = format!(
            "{},{},{},{},{},{}",
            rec.round,
            rec.eta,
            rec.mean_train_loss,
            fmt_opt(rec.test_accuracy),
            fmt_opt(rec.macro_f1),
            rec.delta_bar
        );
        if let Some(dk) = &rec.delta_k {
            for v in dk {
                line.push(',');
                line.push_str(&format!("{v}"));
            }
        }
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Grid specification for the hyper-parameter sweep.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub kind: ObjectiveKind,
    pub betas: Vec<f64>,
    /// Communication rounds per cell.
    pub rounds: usize,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.kind, ObjectiveKind::FedMax | ObjectiveKind::FedL2) {
            return Err(Error::config(format!(
                "beta sweep applies to fedmax or fedl2, not {}",
                self.kind
            )));
        }
        if self.betas.is_empty() || self.seeds.is_empty() || self.rounds == 0 {
            return Err(Error::config(
                "sweep grid, seeds and rounds must be non-empty",
            ));
        }
        Ok(())
    }
}

/// One sweep cell: final test accuracy aggregated over seeds.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub beta: f64,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_final_accuracy: f64,
    pub sd_final_accuracy: f64,
    pub error: Option<String>,
}

/// Run one federated training per (beta, seed) cell and aggregate final
/// accuracies. A failing cell is recorded and the sweep continues.
pub fn run_beta_sweep(
    sweep: &SweepSpec,
    base: &FederationConfig,
    shards: &[DeviceShard],
    testset: &LabeledDataset,
) -> Result<Vec<SweepCell>> {
    sweep.validate()?;
    let mut cells = Vec::with_capacity(sweep.betas.len());
    for &beta in &sweep.betas {
        let objective = match sweep.kind {
            ObjectiveKind::FedMax => LocalObjective::fed_max(beta),
            ObjectiveKind::FedL2 => LocalObjective::fed_l2(beta),
            _ => unreachable!("validated above"),
        };
        let mut per_seed = Vec::with_capacity(sweep.seeds.len());
        let mut error = None;
        for &seed in &sweep.seeds {
            let config = FederationConfig {
                objective,
                seed,
                rounds: sweep.rounds,
                ..base.clone()
            };
            match run_federation(&config, shards, testset) {
                Ok(run) => {
                    let acc = run
                        .records
                        .last()
                        .and_then(|r| r.test_accuracy)
                        .expect("final round is always evaluated");
                    per_seed.push((seed, acc));
                }
                Err(e) => {
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let (mean, sd) = if error.is_none() {
            mean_sd(per_seed.iter().map(|&(_, a)| a))
        } else {
            (f64::NAN, f64::NAN)
        };
        cells.push(SweepCell {
            beta,
            per_seed,
            mean_final_accuracy: mean,
            sd_final_accuracy: sd,
            error,
        });
    }
    Ok(cells)
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let vals: Vec<f64> = values.collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One CSV row per sweep cell:
/// `beta,n_seeds,mean_final_accuracy,sd_final_accuracy,status`.
pub fn write_sweep_csv(cells: &[SweepCell], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(
        w,
        "beta,n_seeds,mean_final_accuracy,sd_final_accuracy,status"
    )
    .map_err(io_err)?;
    for cell in cells {
        let (mean, sd, status) = match &cell.error {
            None => (
                format!("{}", cell.mean_final_accuracy),
                format!("{}", cell.sd_final_accuracy),
                "ok".to_string(),
            ),
            Some(e) => (
                String::new(),
                String::new(),
                format!("error: {}", e.replace(',', ";")),
            ),
        };
        writeln!(
            w,
            "{},{},{mean},{sd},{status}",
            cell.beta,
            cell.per_seed.len()
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, SyntheticSpec};
    use crate::model::{MlpDims, MlpModel};
    use crate::numerics::{sample_gaussian, softmax, Rng, Tensor2D};

    fn shard_from(features: Tensor2D, labels: Vec<usize>) -> DeviceShard {
        DeviceShard {
            device_id: 0,
            samples: features,
            labels,
        }
    }

    #[test]
    fn single_sample_mean_activation_is_its_softmax() {
        let mut rng = Rng::new(1);
        let model = MlpModel::init_random(MlpDims::new(6, 5, 3), &mut rng);
        let x = sample_gaussian(&mut rng, 0.0, 1.0, 1, 6);
        let shard = shard_from(x.clone(), vec![0]);
        let mean = device_mean_activation(&model, &shard).unwrap();
        let trace = model.forward(x).unwrap();
        let want = softmax(trace.activation().row(0));
        for (m, w) in mean.iter().zip(&want) {
            assert!((m - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_mean_activation_is_uniform() {
        let model = MlpModel::zeros(MlpDims::new(4, 8, 3));
        let mut rng = Rng::new(2);
        let x = sample_gaussian(&mut rng, 0.0, 1.0, 10, 4);
        let shard = shard_from(x, vec![0; 10]);
        let mean = device_mean_activation(&model, &shard).unwrap();
        for &v in &mean {
            assert!((v - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_activation_matches_per_sample_loop_oracle() {
        let mut rng = Rng::new(3);
        let model = MlpModel::init_random(MlpDims::new(6, 5, 3), &mut rng);
        let x = sample_gaussian(&mut rng, 0.0, 1.0, 17, 6);
        let shard = shard_from(x.clone(), vec![0; 17]);
        let got = device_mean_activation(&model, &shard).unwrap();

        let mut want = vec![0.0; 5];
        for i in 0..17 {
            let trace = model.forward(x.gather_rows(&[i])).unwrap();
            let s = softmax(trace.activation().row(0));
            for (w, v) in want.iter_mut().zip(&s) {
                *w += v / 17.0;
            }
        }
        let sum: f64 = want.iter().sum();
        for w in &mut want {
            *w /= sum;
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_devices_have_zero_divergence() {
        let acts = vec![vec![0.25, 0.25, 0.25, 0.25]; 5];
        let (delta_k, delta_bar) = similarity_from_mean_activations(&acts).unwrap();
        assert!(delta_k.iter().all(|&d| d == 0.0));
        assert_eq!(delta_bar, 0.0);
    }

    #[test]
    fn two_device_divergence_hand_value() {
        let acts = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let (delta_k, delta_bar) = similarity_from_mean_activations(&acts).unwrap();
        // mean = (0.5, 0.5); KL(mean || device) = 0.5 ln(0.5/0.9) +
        // 0.5 ln(0.5/0.1) = 0.5108 for both devices.
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        for &d in &delta_k {
            assert!((d - want).abs() < 1e-9);
        }
        assert!((delta_bar - want).abs() < 1e-9);
        assert!((want - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn divergence_is_nonnegative_and_order_invariant() {
        let mut rng = Rng::new(4);
        let mut acts: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let raw: Vec<f64> = (0..8).map(|_| rng.next_f64() + 0.01).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            })
            .collect();
        let (dk, dbar) = similarity_from_mean_activations(&acts).unwrap();
        assert!(dk.iter().all(|&d| d >= 0.0));
        assert!((dbar - dk.iter().sum::<f64>() / 6.0).abs() < 1e-15);

        acts.reverse();
        let (dk_rev, dbar_rev) = similarity_from_mean_activations(&acts).unwrap();
        for (a, b) in dk.iter().rev().zip(&dk_rev) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((dbar - dbar_rev).abs() < 1e-12);
    }

    #[test]
    fn saturated_activations_hit_the_epsilon_floor_without_errors() {
        let acts = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (dk, _) = similarity_from_mean_activations(&acts).unwrap();
        assert!(dk.iter().all(|d| d.is_finite() && *d >= 0.0));
    }

    fn constant_predictor(num_classes: usize, in_dim: usize) -> MlpModel {
        // Zero weights: logits identical, argmax ties to class 0.
        MlpModel::zeros(MlpDims::new(in_dim, 4, num_classes))
    }

    #[test]
    fn accuracy_of_constant_predictor_on_all_zero_labels() {
        let model = constant_predictor(3, 5);
        let mut rng = Rng::new(5);
        let testset = LabeledDataset {
            features: sample_gaussian(&mut rng, 0.0, 1.0, 12, 5),
            labels: vec![0; 12],
            num_classes: 3,
        };
        assert_eq!(accuracy(&model, &testset).unwrap(), 1.0);
    }

    #[test]
    fn random_model_accuracy_is_near_chance_on_balanced_labels() {
        let mut rng = Rng::new(6);
        let model = MlpModel::init_random(MlpDims::new(8, 6, 10), &mut rng);
        let n = 5000;
        let testset = LabeledDataset {
            features: sample_gaussian(&mut rng, 0.0, 1.0, n, 8),
            labels: (0..n).map(|i| i % 10).collect(),
            num_classes: 10,
        };
        let acc = accuracy(&model, &testset).unwrap();
        // Labels are independent of the model's predictions, so accuracy is
        // binomial around 0.1.
        assert!((acc - 0.1).abs() < 0.02, "accuracy {acc}");
    }

    #[test]
    fn perfect_predictions_give_accuracy_and_f1_one() {
        let preds = vec![0, 1, 2, 1, 0];
        let labels = vec![0, 1, 2, 1, 0];
        assert_eq!(accuracy_from_predictions(&preds, &labels), 1.0);
        assert_eq!(macro_f1_from_predictions(&preds, &labels, 3), 1.0);
    }

    #[test]
    fn macro_f1_balanced_binary_confusion() {
        // Per class TP=1, FP=1, FN=1: F1 = 0.5 each, macro 0.5.
        let labels = vec![0, 0, 1, 1];
        let preds = vec![0, 1, 0, 1];
        let f1 = macro_f1_from_predictions(&preds, &labels, 2);
        assert!((f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_single_class_predictor_on_balanced_set() {
        // Predicting class 0 always: class 0 has P=0.5, R=1 (F1 = 2/3),
        // class 1 contributes 0; macro = 1/3.
        let labels = vec![0, 0, 1, 1];
        let preds = vec![0, 0, 0, 0];
        let f1 = macro_f1_from_predictions(&preds, &labels, 2);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_invariant_under_test_row_permutation() {
        let mut rng = Rng::new(7);
        let model = MlpModel::init_random(MlpDims::new(6, 5, 4), &mut rng);
        let n = 40;
        let features = sample_gaussian(&mut rng, 0.0, 1.0, n, 6);
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(4) as usize).collect();
        let testset = LabeledDataset {
            features: features.clone(),
            labels: labels.clone(),
            num_classes: 4,
        };
        let (acc, f1) = evaluate(&model, &testset).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permuted = LabeledDataset {
            features: features.gather_rows(&perm),
            labels: perm.iter().map(|&i| labels[i]).collect(),
            num_classes: 4,
        };
        let (acc_p, f1_p) = evaluate(&model, &permuted).unwrap();
        assert_eq!(acc, acc_p);
        assert_eq!(f1, f1_p);
    }

    #[test]
    fn export_has_one_row_per_sample_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("activations.csv");
        let mut rng = Rng::new(8);
        let model = MlpModel::init_random(MlpDims::new(5, 4, 3), &mut rng);
        let shards: Vec<DeviceShard> = (0..3)
            .map(|device_id| {
                let n = 4 + device_id;
                DeviceShard {
                    device_id,
                    samples: sample_gaussian(&mut rng, 0.0, 1.0, n, 5),
                    labels: (0..n).map(|i| i % 3).collect(),
                }
            })
            .collect();
        export_activations(&model, &shards, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), 2 + 4);
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 4 + 5 + 6);

        // Parse back the first device's first row and compare exactly.
        let trace = model.forward(shards[0].samples.gather_rows(&[0])).unwrap();
        let first: Vec<&str> = rows[0].split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[1], "0");
        for (j, v) in trace.activation().row(0).iter().enumerate() {
            let parsed: f64 = first[2 + j].parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn sweep_single_cell_equals_single_run() {
        let data = generate_synthetic(&SyntheticSpec {
            in_dim: 10,
            hidden_dim: 6,
            num_devices: 4,
            samples_per_device: 20,
            test_samples_per_device: 8,
            seed: 9,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let base = FederationConfig {
            num_devices: 4,
            rounds: 3,
            batch_size: 10,
            hidden_dim: 6,
            ..FederationConfig::default()
        };
        let sweep = SweepSpec {
            kind: ObjectiveKind::FedMax,
            betas: vec![5.0],
            rounds: 3,
            seeds: vec![123],
        };
        let cells = run_beta_sweep(&sweep, &base, &data.shards, &data.testset).unwrap();
        assert_eq!(cells.len(), 1);
        assert!(cells[0].error.is_none());

        let config = FederationConfig {
            objective: LocalObjective::fed_max(5.0),
            seed: 123,
            rounds: 3,
            ..base
        };
        let run = run_federation(&config, &data.shards, &data.testset).unwrap();
        let want = run.records.last().unwrap().test_accuracy.unwrap();
        assert_eq!(cells[0].mean_final_accuracy, want);
        assert_eq!(cells[0].sd_final_accuracy, 0.0);
    }

    #[test]
    fn sweep_csv_has_one_row_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let cells = vec![
            SweepCell {
                beta: 1.0,
                per_seed: vec![(1, 0.5), (2, 0.6)],
                mean_final_accuracy: 0.55,
                sd_final_accuracy: 0.07,
                error: None,
            },
            SweepCell {
                beta: 10.0,
                per_seed: vec![],
                mean_final_accuracy: f64::NAN,
                sd_final_accuracy: f64::NAN,
                error: Some("seed 1: boom, with commas".into()),
            },
        ];
        write_sweep_csv(&cells, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,2,0.55,0.07,ok"));
        assert!(lines[2].starts_with("10,0,,,error:"));
        // Commas inside error messages are sanitized.
        assert_eq!(lines[2].split(',').count(), 5);
    }

    #[test]
    fn metrics_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let records = vec![RoundRecord {
            round: 0,
            eta: 0.01,
            selected: vec![0, 1],
            mean_train_loss: 2.5,
            test_accuracy: Some(0.25),
            macro_f1: None,
            delta_bar: 0.125,
            delta_k: Some(vec![0.1, 0.15]),
        }];
        write_metrics_csv(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "round,eta,mean_train_loss,test_accuracy,macro_f1,delta_bar,delta_0,delta_1\n\
             0,0.01,2.5,0.25,,0.125,0.1,0.15\n"
        );
    }
}
