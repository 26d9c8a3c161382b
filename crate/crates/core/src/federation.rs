//! Server/client training loop: client sampling, local SGD for E epochs,
//! sample-count-weighted aggregation, and the learning-rate schedule.
//!
//! Determinism: every stochastic step draws from a seed derived from
//! (run seed, round, device id), never from shared mutable state. Client
//! updates within a round are independent and run in parallel; aggregation
//! folds them in device-id order, so parallel and serial execution produce
//! identical global weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::datagen::{DeviceShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{MlpDims, MlpModel};
use crate::numerics::{derive_seed, Rng};
use crate::objectives::{LocalObjective, ObjectiveKind};

const INIT_STREAM: u64 = 0x01;
const SELECT_STREAM: u64 = 0x02;
const CLIENT_STREAM: u64 = 0x03;

/// Which devices enter the per-round similarity statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityScope {
    /// Only the devices trained this round, with their post-training local
    /// models.
    Selected,
    /// Every device: trained devices contribute their local model,
    /// untrained devices the round-start global model.
    All,
}

impl std::str::FromStr for SimilarityScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selected" => Ok(SimilarityScope::Selected),
            "all" => Ok(SimilarityScope::All),
            other => Err(Error::config(format!(
                "unknown similarity scope '{other}' (expected selected|all)"
            ))),
        }
    }
}

/// Run-level parameters of one federated training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Total number of devices (M).
    pub num_devices: usize,
    /// Fraction of devices selected per round (C), in (0, 1].
    pub client_fraction: f64,
    /// Communication rounds (T).
    pub rounds: usize,
    /// Local epochs per selected client per round (E).
    pub local_epochs: usize,
    /// Mini-batch size (N); the final short batch of an epoch is kept.
    pub batch_size: usize,
    /// Initial learning rate.
    pub eta0: f64,
    /// Per-round multiplicative learning-rate decay, in (0, 1].
    pub lr_decay: f64,
    pub objective: LocalObjective,
    pub seed: u64,
    pub similarity_scope: SimilarityScope,
    /// Hidden width of the trained perceptron.
    pub hidden_dim: usize,
    /// Evaluate test accuracy / macro-F1 every this many rounds (the final
    /// round is always evaluated). Similarity is tracked every round.
    pub eval_stride: usize,
    /// Record per-device similarity values in every round record.
    pub log_delta_k: bool,
}

impl Default for FederationConfig {
    /// Defaults match the synthetic similarity protocol: every device
    /// participates each round, one local epoch, batches of 50, constant
    /// learning rate 0.01.
    fn default() -> Self {
        FederationConfig {
            num_devices: 20,
            client_fraction: 1.0,
            rounds: 200,
            local_epochs: 1,
            batch_size: 50,
            eta0: 0.01,
            lr_decay: 1.0,
            objective: LocalObjective::fed_avg(),
            seed: 42,
            similarity_scope: SimilarityScope::All,
            hidden_dim: 512,
            eval_stride: 1,
            log_delta_k: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(Error::config("num_devices must be positive"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::config(format!(
                "client_fraction must be in (0, 1], got {}",
                self.client_fraction
            )));
        }
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "rounds, local_epochs, batch_size must be positive",
            ));
        }
        if self.eta0 <= 0.0 || !self.eta0.is_finite() {
            return Err(Error::config(format!(
                "eta0 must be > 0, got {}",
                self.eta0
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim must be positive"));
        }
        if self.eval_stride == 0 {
            return Err(Error::config("eval_stride must be positive"));
        }
        self.objective.validate()
    }

    /// Number of clients trained per round: max(ceil(C * M), 1).
    pub fn clients_per_round(&self) -> usize {
        ((self.client_fraction * self.num_devices as f64).ceil() as usize).max(1)
    }
}

/// Global model weights at the given round index.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub model: MlpModel,
    pub round: usize,
}

/// Per-round metric snapshot.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub eta: f64,
    pub selected: Vec<usize>,
    /// Mean over the round's clients of their mean per-batch training loss.
    pub mean_train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Mean per-device activation divergence this round.
    pub delta_bar: f64,
    pub delta_k: Option<Vec<f64>>,
}

/// Full run output: per-round history and the final global model.
#[derive(Debug, Clone)]
pub struct FederationRun {
    pub records: Vec<RoundRecord>,
    pub global: GlobalModel,
}

impl FederationRun {
    pub fn final_model(&self) -> &MlpModel {
        &self.global.model
    }
}

/// eta_t = eta0 * decay^t.
pub fn lr_schedule(eta0: f64, lr_decay: f64, t: usize) -> f64 {
    eta0 * lr_decay.powi(t as i32)
}

/// Uniformly random subset of max(ceil(C * M), 1) distinct device ids,
/// sorted ascending.
pub fn select_clients(rng: &mut Rng, num_devices: usize, fraction: f64) -> Vec<usize> {
    let m = ((fraction * num_devices as f64).ceil() as usize)
        .max(1)
        .min(num_devices);
    rng.sample_distinct(m, num_devices)
}

/// Seed of the RNG substream owned by (round, device). Exposed so external
/// oracles can replay a client's exact shuffle sequence.
pub fn client_rng_seed(seed: u64, round: usize, device_id: usize) -> u64 {
    derive_seed(seed, &[CLIENT_STREAM, round as u64, device_id as u64])
}

/// Seed used to initialize the global model.
pub fn global_init_seed(seed: u64) -> u64 {
    derive_seed(seed, &[INIT_STREAM])
}

fn selection_seed(seed: u64, round: usize) -> u64 {
    derive_seed(seed, &[SELECT_STREAM, round as u64])
}

/// One client's local training pass: clone the transmitted weights, run E
/// epochs of mini-batch SGD over the shard (shuffled each epoch, final short
/// batch kept), and return the updated weights together with the mean
/// per-batch loss. E = 0 returns the global weights unchanged (loss NaN).
pub fn client_update(
    global: &MlpModel,
    shard: &DeviceShard,
    config: &FederationConfig,
    eta: f64,
    rng: &mut Rng,
) -> Result<(MlpModel, f64)> {
    if shard.n_k() == 0 {
        return Err(Error::contract(format!(
            "device {} has an empty shard",
            shard.device_id
        )));
    }
    let global_ref = (config.objective.kind == ObjectiveKind::FedProx).then_some(global);
    let mut model = global.clone();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;

    for _ in 0..config.local_epochs {
        let mut order: Vec<usize> = (0..shard.n_k()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let x = shard.samples.gather_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| shard.labels[i]).collect();
            let trace = model.forward(x)?;
            let (loss, grads) = model.backward(&trace, &labels, &config.objective, global_ref)?;
            if !loss.is_finite() {
                return Err(Error::contract(format!(
                    "training loss diverged to {loss} on device {}",
                    shard.device_id
                )));
            }
            model.sgd_step(&grads, eta);
            loss_sum += loss;
            batches += 1;
        }
    }
    if batches > 0 && !model.is_finite() {
        return Err(Error::contract(format!(
            "non-finite parameters after local training on device {}",
            shard.device_id
        )));
    }
    let mean_loss = if batches > 0 {
        loss_sum / batches as f64
    } else {
        f64::NAN
    };
    Ok((model, mean_loss))
}

/// Normalized aggregation weights n_k / sum(n_k). The last weight is set to
/// 1 minus the partial sum so the weights sum to exactly 1.0 in f64.
pub fn aggregation_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let total = total as f64;
    let mut weights: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    if let Some((last, rest)) = weights.split_last_mut() {
        if !rest.is_empty() {
            let partial: f64 = rest.iter().sum();
            *last = 1.0 - partial;
            debug_assert!(*last >= 0.0);
        } else {
            *last = 1.0;
        }
    }
    weights
}

/// Sample-count-weighted parameter average over the participating set.
///
/// Evaluated as p_0 + sum_k w_k (p_k - p_0), which with weights summing to
/// exactly 1 is the weighted mean, reduces to the identity for a single
/// client, and returns bitwise-equal weights when all locals agree.
pub fn aggregate(locals: &[(MlpModel, usize)]) -> Result<MlpModel> {
    let (first, _) = locals
        .first()
        .ok_or_else(|| Error::contract("aggregate: no local models"))?;
    if locals.iter().any(|(m, _)| m.dims() != first.dims()) {
        return Err(Error::contract("aggregate: inconsistent model shapes"));
    }
    if locals.iter().map(|&(_, n)| n).sum::<usize>() == 0 {
        return Err(Error::contract("aggregate: all sample counts are zero"));
    }
    let counts: Vec<usize> = locals.iter().map(|&(_, n)| n).collect();
    let weights = aggregation_weights(&counts);

    let mut out = first.clone();
    for (k, (local, _)) in locals.iter().enumerate().skip(1) {
        let w = weights[k];
        for ((o, l), f) in out.params_mut().zip(local.params()).zip(first.params()) {
            *o += w * (l - f);
        }
    }
    Ok(out)
}

/// Execute the full server loop over `config.rounds` rounds and record
/// per-round metrics. `shards` must hold one entry per device; `testset`
/// supplies the evaluation data and the class count.
pub fn run_federation(
    config: &FederationConfig,
    shards: &[DeviceShard],
    testset: &LabeledDataset,
) -> Result<FederationRun> {
    config.validate()?;
    if shards.len() != config.num_devices {
        return Err(Error::config(format!(
            "expected {} shards, got {}",
            config.num_devices,
            shards.len()
        )));
    }
    if testset.is_empty() {
        return Err(Error::config("empty test set"));
    }
    let in_dim = testset.features.cols();
    for shard in shards {
        if shard.n_k() == 0 {
            return Err(Error::config(format!(
                "device {} has no samples",
                shard.device_id
            )));
        }
        if shard.samples.cols() != in_dim {
            return Err(Error::config(format!(
                "device {} feature width {} does not match test set width {in_dim}",
                shard.device_id,
                shard.samples.cols()
            )));
        }
        if let Some(&bad) = shard.labels.iter().find(|&&l| l >= testset.num_classes) {
            return Err(Error::config(format!(
                "device {} carries label {bad} >= {} classes",
                shard.device_id, testset.num_classes
            )));
        }
    }

    let dims = MlpDims::new(in_dim, config.hidden_dim, testset.num_classes);
    let mut global = GlobalModel {
        model: MlpModel::init_random(dims, &mut Rng::new(global_init_seed(config.seed))),
        round: 0,
    };
    let mut records = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let eta = lr_schedule(config.eta0, config.lr_decay, t);
        let mut sel_rng = Rng::new(selection_seed(config.seed, t));
        let selected = select_clients(&mut sel_rng, config.num_devices, config.client_fraction);

        let locals: Vec<(MlpModel, f64)> = selected
            .par_iter()
            .map(|&id| {
                let mut rng = Rng::new(client_rng_seed(config.seed, t, id));
                client_update(&global.model, &shards[id], config, eta, &mut rng)
                    .map_err(|e| e.in_round(t, id))
            })
            .collect::<Result<_>>()?;

        // Similarity is measured before aggregation, against each trained
        // local model (untrained devices contribute the round-start global).
        let sim = match config.similarity_scope {
            SimilarityScope::All => {
                let models: Vec<&MlpModel> = (0..config.num_devices)
                    .map(|id| match selected.binary_search(&id) {
                        Ok(pos) => &locals[pos].0,
                        Err(_) => &global.model,
                    })
                    .collect();
                let shard_refs: Vec<&DeviceShard> = shards.iter().collect();
                analysis::similarity_round(t, &models, &shard_refs, SimilarityScope::All)
            }
            SimilarityScope::Selected => {
                let models: Vec<&MlpModel> = locals.iter().map(|(m, _)| m).collect();
                let shard_refs: Vec<&DeviceShard> =
                    selected.iter().map(|&id| &shards[id]).collect();
                analysis::similarity_round(t, &models, &shard_refs, SimilarityScope::Selected)
            }
        }
        .map_err(|e| e.in_server_round(t))?;

        let mean_train_loss = locals.iter().map(|&(_, l)| l).sum::<f64>() / locals.len() as f64;

        let pairs: Vec<(MlpModel, usize)> = selected
            .iter()
            .zip(locals)
            .map(|(&id, (model, _))| (model, shards[id].n_k()))
            .collect();
        global = GlobalModel {
            model: aggregate(&pairs).map_err(|e| e.in_server_round(t))?,
            round: t + 1,
        };
        if !global.model.is_finite() {
            return Err(
                Error::contract("aggregated model has non-finite parameters").in_server_round(t),
            );
        }

        let (test_accuracy, macro_f1) = if t % config.eval_stride == 0 || t + 1 == config.rounds {
            let (acc, f1) =
                analysis::evaluate(&global.model, testset).map_err(|e| e.in_server_round(t))?;
            (Some(acc), Some(f1))
        } else {
            (None, None)
        };

        records.push(RoundRecord {
            round: t,
            eta,
            selected,
            mean_train_loss,
            test_accuracy,
            macro_f1,
            delta_bar: sim.delta_bar,
            delta_k: config.log_delta_k.then_some(sim.delta_k),
        });
    }

    Ok(FederationRun { records, global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, SyntheticSpec};
    use crate::numerics::sample_gaussian;

    fn tiny_synthetic(seed: u64) -> crate::datagen::SyntheticData {
        generate_synthetic(&SyntheticSpec {
            in_dim: 12,
            hidden_dim: 8,
            num_devices: 6,
            samples_per_device: 24,
            test_samples_per_device: 8,
            gamma1: 0.5,
            gamma2: 0.5,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn tiny_config() -> FederationConfig {
        FederationConfig {
            num_devices: 6,
            rounds: 4,
            batch_size: 8,
            hidden_dim: 8,
            ..FederationConfig::default()
        }
    }

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_schedule(0.1, 0.9992, 0), 0.1);
        assert_eq!(lr_schedule(0.05, 1.0, 1000), 0.05);
        let eta = lr_schedule(0.1, 0.9992, 3000);
        assert!((eta - 0.00907).abs() < 5e-5, "eta {eta}");
    }

    #[test]
    fn select_clients_counts() {
        let mut rng = Rng::new(1);
        let s = select_clients(&mut rng, 100, 0.1);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));

        let all = select_clients(&mut rng, 7, 1.0);
        assert_eq!(all, vec![0, 1, 2, 3, 4, 5, 6]);

        // C small enough to round to zero still selects one client.
        let one = select_clients(&mut rng, 10, 0.01);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn selection_frequency_is_uniform() {
        let mut rng = Rng::new(2);
        let mut counts = vec![0usize; 100];
        let draws = 10_000;
        for _ in 0..draws {
            for id in select_clients(&mut rng, 100, 0.1) {
                counts[id] += 1;
            }
        }
        for (id, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() < 0.01, "device {id}: frequency {freq}");
        }
    }

    #[test]
    fn aggregation_weights_sum_to_one_exactly() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let n = 1 + rng.next_below(12) as usize;
            let counts: Vec<usize> = (0..n).map(|_| 1 + rng.next_below(500) as usize).collect();
            let w = aggregation_weights(&counts);
            assert_eq!(w.iter().sum::<f64>(), 1.0);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn aggregate_hand_case() {
        // Two single-parameter models 0 and 4 with counts (1, 3) average to
        // 3.
        let dims = MlpDims::new(1, 1, 1);
        let mut a = MlpModel::zeros(dims);
        let mut b = MlpModel::zeros(dims);
        for p in a.params_mut() {
            *p = 0.0;
        }
        for p in b.params_mut() {
            *p = 4.0;
        }
        let agg = aggregate(&[(a, 1), (b, 3)]).unwrap();
        assert!(agg.params().all(|p| p == 3.0));
    }

    #[test]
    fn aggregate_identical_locals_is_exact() {
        let dims = MlpDims::new(5, 4, 3);
        let mut rng = Rng::new(4);
        let m = MlpModel::init_random(dims, &mut rng);
        let agg = aggregate(&[(m.clone(), 3), (m.clone(), 7), (m.clone(), 1)]).unwrap();
        assert_eq!(agg, m);
    }

    #[test]
    fn aggregate_matches_scalar_loop_oracle() {
        let dims = MlpDims::new(4, 3, 2);
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let k = 2 + rng.next_below(5) as usize;
            let locals: Vec<(MlpModel, usize)> = (0..k)
                .map(|_| {
                    (
                        MlpModel::init_random(dims, &mut rng),
                        1 + rng.next_below(90) as usize,
                    )
                })
                .collect();
            let agg = aggregate(&locals).unwrap();

            let total: usize = locals.iter().map(|&(_, n)| n).sum();
            let flat: Vec<Vec<f64>> = locals.iter().map(|(m, _)| m.params().collect()).collect();
            for (i, got) in agg.params().enumerate() {
                let mut want = 0.0;
                for (k, &(_, n)) in locals.iter().enumerate() {
                    want += (n as f64 / total as f64) * flat[k][i];
                }
                assert!((got - want).abs() < 1e-12, "param {i}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn aggregate_with_equal_counts_is_plain_mean() {
        let dims = MlpDims::new(3, 3, 2);
        let mut rng = Rng::new(6);
        let locals: Vec<(MlpModel, usize)> = (0..4)
            .map(|_| (MlpModel::init_random(dims, &mut rng), 10))
            .collect();
        let agg = aggregate(&locals).unwrap();
        let flat: Vec<Vec<f64>> = locals.iter().map(|(m, _)| m.params().collect()).collect();
        for (i, got) in agg.params().enumerate() {
            let want: f64 = flat.iter().map(|p| p[i]).sum::<f64>() / 4.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        assert!(aggregate(&[]).is_err());
        let a = MlpModel::zeros(MlpDims::new(2, 2, 2));
        let b = MlpModel::zeros(MlpDims::new(3, 2, 2));
        assert!(aggregate(&[(a.clone(), 1), (b, 1)]).is_err());
        assert!(aggregate(&[(a, 0)]).is_err());
    }

    #[test]
    fn client_update_zero_epochs_returns_global_unchanged() {
        let data = tiny_synthetic(11);
        let config = FederationConfig {
            local_epochs: 0,
            ..tiny_config()
        };
        let dims = MlpDims::new(12, 8, 10);
        let mut rng = Rng::new(7);
        let global = MlpModel::init_random(dims, &mut rng);
        let (updated, loss) =
            client_update(&global, &data.shards[0], &config, 0.01, &mut rng).unwrap();
        assert_eq!(updated, global);
        assert!(loss.is_nan());
    }

    #[test]
    fn client_update_rejects_empty_shard() {
        let config = tiny_config();
        let dims = MlpDims::new(12, 8, 10);
        let mut rng = Rng::new(8);
        let global = MlpModel::init_random(dims, &mut rng);
        let empty = DeviceShard {
            device_id: 0,
            samples: crate::numerics::Tensor2D::zeros(0, 12),
            labels: vec![],
        };
        assert!(client_update(&global, &empty, &config, 0.01, &mut rng).is_err());
    }

    #[test]
    fn fedmax_beta_zero_trajectory_equals_fedavg() {
        let data = tiny_synthetic(21);
        let base = tiny_config();
        let avg = run_federation(
            &FederationConfig {
                objective: LocalObjective::fed_avg(),
                ..base.clone()
            },
            &data.shards,
            &data.testset,
        )
        .unwrap();
        let max0 = run_federation(
            &FederationConfig {
                objective: LocalObjective::fed_max(0.0),
                ..base
            },
            &data.shards,
            &data.testset,
        )
        .unwrap();
        let a: Vec<u64> = avg.final_model().params().map(f64::to_bits).collect();
        let b: Vec<u64> = max0.final_model().params().map(f64::to_bits).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn run_federation_is_deterministic() {
        let data = tiny_synthetic(31);
        let config = tiny_config();
        let r1 = run_federation(&config, &data.shards, &data.testset).unwrap();
        let r2 = run_federation(&config, &data.shards, &data.testset).unwrap();
        assert_eq!(r1.records.len(), r2.records.len());
        for (a, b) in r1.records.iter().zip(&r2.records) {
            assert_eq!(a.selected, b.selected);
            assert_eq!(a.mean_train_loss.to_bits(), b.mean_train_loss.to_bits());
            assert_eq!(a.delta_bar.to_bits(), b.delta_bar.to_bits());
            assert_eq!(a.test_accuracy, b.test_accuracy);
        }
        let p1: Vec<u64> = r1.final_model().params().map(f64::to_bits).collect();
        let p2: Vec<u64> = r2.final_model().params().map(f64::to_bits).collect();
        assert_eq!(p1, p2);
    }

    #[test]
    fn parallel_and_serial_client_updates_agree() {
        let data = tiny_synthetic(41);
        let config = FederationConfig {
            client_fraction: 0.5,
            rounds: 2,
            ..tiny_config()
        };
        let run = run_federation(&config, &data.shards, &data.testset).unwrap();

        // Replay serially with the same derived streams.
        let dims = MlpDims::new(12, config.hidden_dim, data.testset.num_classes);
        let mut global = MlpModel::init_random(dims, &mut Rng::new(global_init_seed(config.seed)));
        for t in 0..config.rounds {
            let eta = lr_schedule(config.eta0, config.lr_decay, t);
            let mut sel_rng = Rng::new(selection_seed(config.seed, t));
            let selected = select_clients(&mut sel_rng, config.num_devices, config.client_fraction);
            assert_eq!(selected, run.records[t].selected);
            let mut pairs = Vec::new();
            for &id in &selected {
                let mut rng = Rng::new(client_rng_seed(config.seed, t, id));
                let (m, _) =
                    client_update(&global, &data.shards[id], &config, eta, &mut rng).unwrap();
                pairs.push((m, data.shards[id].n_k()));
            }
            global = aggregate(&pairs).unwrap();
        }
        let a: Vec<u64> = run.final_model().params().map(f64::to_bits).collect();
        let b: Vec<u64> = global.params().map(f64::to_bits).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn round_records_have_expected_shape() {
        let data = tiny_synthetic(51);
        let config = FederationConfig {
            client_fraction: 0.4,
            eval_stride: 3,
            log_delta_k: true,
            ..tiny_config()
        };
        let run = run_federation(&config, &data.shards, &data.testset).unwrap();
        assert_eq!(run.records.len(), config.rounds);
        let m = config.clients_per_round();
        for rec in &run.records {
            assert_eq!(rec.selected.len(), m);
            assert!(rec.delta_bar >= 0.0);
            let dk = rec.delta_k.as_ref().unwrap();
            assert_eq!(dk.len(), config.num_devices);
            let evaluated = rec.round % 3 == 0 || rec.round + 1 == config.rounds;
            assert_eq!(rec.test_accuracy.is_some(), evaluated);
        }
    }

    #[test]
    fn single_device_run_reduces_to_centralized_training() {
        // One device, full participation, one round: the federated loop is
        // an identity wrapper around one local training pass.
        let mut rng = Rng::new(61);
        let features = sample_gaussian(&mut rng, 0.0, 1.0, 30, 10);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let dataset = LabeledDataset {
            features,
            labels,
            num_classes: 3,
        };
        let shard = DeviceShard {
            device_id: 0,
            samples: dataset.features.clone(),
            labels: dataset.labels.clone(),
        };
        let config = FederationConfig {
            num_devices: 1,
            rounds: 1,
            batch_size: 10,
            hidden_dim: 6,
            ..FederationConfig::default()
        };
        let run = run_federation(&config, std::slice::from_ref(&shard), &dataset).unwrap();

        let dims = MlpDims::new(10, 6, 3);
        let mut oracle = MlpModel::init_random(dims, &mut Rng::new(global_init_seed(config.seed)));
        let mut crng = Rng::new(client_rng_seed(config.seed, 0, 0));
        let (trained, _) = client_update(&oracle, &shard, &config, config.eta0, &mut crng).unwrap();
        oracle = trained;

        let a: Vec<u64> = run.final_model().params().map(f64::to_bits).collect();
        let b: Vec<u64> = oracle.params().map(f64::to_bits).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn selected_scope_tracks_only_trained_devices() {
        let data = tiny_synthetic(81);
        let config = FederationConfig {
            client_fraction: 0.5,
            similarity_scope: SimilarityScope::Selected,
            log_delta_k: true,
            rounds: 2,
            ..tiny_config()
        };
        let run = run_federation(&config, &data.shards, &data.testset).unwrap();
        for rec in &run.records {
            assert_eq!(
                rec.delta_k.as_ref().unwrap().len(),
                config.clients_per_round()
            );
        }
    }

    #[test]
    fn fedprox_run_trains_and_differs_from_fedavg() {
        let data = tiny_synthetic(91);
        let base = tiny_config();
        let avg = run_federation(
            &FederationConfig {
                objective: LocalObjective::fed_avg(),
                ..base.clone()
            },
            &data.shards,
            &data.testset,
        )
        .unwrap();
        let prox = run_federation(
            &FederationConfig {
                objective: LocalObjective::fed_prox(1.0),
                ..base
            },
            &data.shards,
            &data.testset,
        )
        .unwrap();
        assert!(prox.final_model().is_finite());
        // The proximal pull towards the round-start weights must change the
        // trajectory.
        let a: Vec<u64> = avg.final_model().params().map(f64::to_bits).collect();
        let b: Vec<u64> = prox.final_model().params().map(f64::to_bits).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = tiny_config();
        c.client_fraction = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.lr_decay = 1.5;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.objective.beta = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn run_rejects_mismatched_shard_count() {
        let data = tiny_synthetic(71);
        let config = FederationConfig {
            num_devices: 4,
            ..tiny_config()
        };
        assert!(run_federation(&config, &data.shards, &data.testset).is_err());
    }
}
