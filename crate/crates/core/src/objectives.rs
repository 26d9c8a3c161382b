//! The four local training objectives and their regularizer terms.
//!
//! Every objective shares the same cross-entropy data term; they differ in
//! what is added on top:
//!
//! * `FedAvg`   - nothing.
//! * `FedL2`    - `beta * ||a_i||_2` per sample, the L2 norm of the
//!   activation vector feeding the last fully-connected layer.
//! * `FedMax`   - `-beta * H(softmax(a_i))` per sample (negative entropy of
//!   the softmaxed activation), equivalently `beta * KL(softmax(a_i) || U)`
//!   up to the constant `beta * ln d`. Both forms are implemented; they give
//!   identical gradients.
//! * `FedProx`  - `(mu / 2) * ||w - w_global||^2` over all parameters, added
//!   once per batch.
//!
//! Per-sample regularizers are averaged over the mini-batch, like the
//! cross-entropy term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, MlpModel};
use crate::numerics::{kl_divergence, log_sum_exp, softmax_lse, uniform, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    FedAvg,
    FedL2,
    FedMax,
    FedProx,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::FedAvg => "fedavg",
            ObjectiveKind::FedL2 => "fedl2",
            ObjectiveKind::FedMax => "fedmax",
            ObjectiveKind::FedProx => "fedprox",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(ObjectiveKind::FedAvg),
            "fedl2" => Ok(ObjectiveKind::FedL2),
            "fedmax" => Ok(ObjectiveKind::FedMax),
            "fedprox" => Ok(ObjectiveKind::FedProx),
            other => Err(Error::config(format!(
                "unknown algorithm '{other}' (expected fedavg|fedl2|fedmax|fedprox)"
            ))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which algebraic form of the maximum-entropy term to optimize. The
/// KL-to-uniform form differs from the negative-entropy form by the constant
/// `beta * ln d`, so gradients are identical; it exists so the equivalence is
/// auditable end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyForm {
    NegEntropy,
    KlUniform,
}

/// Tagged local-objective configuration.
///
/// Invariants: `beta == 0` for the FedAvg and FedProx kinds, `mu == 0` for
/// everything except FedProx. Use the constructors; `validate` re-checks
/// configurations assembled from files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalObjective {
    pub kind: ObjectiveKind,
    pub beta: f64,
    pub mu: f64,
    pub entropy_form: EntropyForm,
}

impl LocalObjective {
    pub fn fed_avg() -> Self {
        LocalObjective {
            kind: ObjectiveKind::FedAvg,
            beta: 0.0,
            mu: 0.0,
            entropy_form: EntropyForm::NegEntropy,
        }
    }

    pub fn fed_l2(beta: f64) -> Self {
        LocalObjective {
            kind: ObjectiveKind::FedL2,
            beta,
            mu: 0.0,
            entropy_form: EntropyForm::NegEntropy,
        }
    }

    pub fn fed_max(beta: f64) -> Self {
        LocalObjective {
            kind: ObjectiveKind::FedMax,
            beta,
            mu: 0.0,
            entropy_form: EntropyForm::NegEntropy,
        }
    }

    pub fn fed_max_kl(beta: f64) -> Self {
        LocalObjective {
            kind: ObjectiveKind::FedMax,
            beta,
            mu: 0.0,
            entropy_form: EntropyForm::KlUniform,
        }
    }

    pub fn fed_prox(mu: f64) -> Self {
        LocalObjective {
            kind: ObjectiveKind::FedProx,
            beta: 0.0,
            mu,
            entropy_form: EntropyForm::NegEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(Error::config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if matches!(self.kind, ObjectiveKind::FedAvg | ObjectiveKind::FedProx) && self.beta != 0.0 {
            return Err(Error::config(format!(
                "beta must be 0 for {}, got {}",
                self.kind, self.beta
            )));
        }
        if self.kind != ObjectiveKind::FedProx && self.mu != 0.0 {
            return Err(Error::config(format!(
                "mu must be 0 for {}, got {}",
                self.kind, self.mu
            )));
        }
        Ok(())
    }

    /// True when the objective contributes an activation-regularizer term.
    pub(crate) fn has_activation_term(&self) -> bool {
        self.beta != 0.0 && matches!(self.kind, ObjectiveKind::FedL2 | ObjectiveKind::FedMax)
    }
}

/// -ln softmax(logits)[label], evaluated as lse(logits) - logits[label].
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Mean cross-entropy over a batch of logit rows.
pub fn mean_cross_entropy(logits: &Tensor2D, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::contract(format!(
            "batch size mismatch: {} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let mut acc = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        acc += cross_entropy_loss(logits.row(r), label)?;
    }
    Ok(acc / labels.len() as f64)
}

fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// beta * ||a||_2 for one activation vector.
pub fn l2_activation_penalty(a: &[f64], beta: f64) -> f64 {
    beta * norm2(a)
}

/// Gradient of `l2_activation_penalty` w.r.t. a. Defined as zero at a = 0
/// (the ReLU keeps a pinned there under small parameter perturbations, so
/// this matches the numerical derivative).
pub fn l2_activation_penalty_grad(a: &[f64], beta: f64) -> Vec<f64> {
    let n = norm2(a);
    if n == 0.0 {
        return vec![0.0; a.len()];
    }
    a.iter().map(|x| beta * x / n).collect()
}

/// Entropy of softmax(a) in the log-sum-exp form: H = lse - sum s_j a_j.
fn softmax_entropy(a: &[f64]) -> f64 {
    let (s, lse) = softmax_lse(a);
    lse - s.iter().zip(a).map(|(si, ai)| si * ai).sum::<f64>()
}

/// -beta * H(softmax(a)): minimizing this maximizes the entropy of the
/// softmaxed activation vector.
pub fn max_entropy_penalty(a: &[f64], beta: f64) -> f64 {
    -beta * softmax_entropy(a)
}

/// beta * KL(softmax(a) || U), routed through the generic KL kernel.
pub fn kl_uniform_penalty(a: &[f64], beta: f64) -> f64 {
    let (s, _) = softmax_lse(a);
    let kl = kl_divergence(&s, &uniform(a.len()))
        .expect("softmax output is a valid distribution and U is positive");
    beta * kl
}

/// d/da of `max_entropy_penalty`: beta * s_l * (ln s_l + H(s)), with
/// ln s_l = a_l - lse.
pub fn max_entropy_penalty_grad(a: &[f64], beta: f64) -> Vec<f64> {
    let (s, lse) = softmax_lse(a);
    let h = lse - s.iter().zip(a).map(|(si, ai)| si * ai).sum::<f64>();
    s.iter()
        .zip(a)
        .map(|(si, ai)| beta * si * (ai - lse + h))
        .collect()
}

/// d/da of `kl_uniform_penalty`: beta * s_l * (ln(s_l d) - KL(s || U)).
/// Algebraically identical to `max_entropy_penalty_grad`.
pub fn kl_uniform_penalty_grad(a: &[f64], beta: f64) -> Vec<f64> {
    let (s, lse) = softmax_lse(a);
    let log_d = (a.len() as f64).ln();
    let kl: f64 = s
        .iter()
        .zip(a)
        .map(|(si, ai)| si * (ai - lse + log_d))
        .sum();
    s.iter()
        .zip(a)
        .map(|(si, ai)| beta * si * ((ai - lse + log_d) - kl))
        .collect()
}

/// (mu / 2) * sum over all parameters of (local - global)^2.
pub fn proximal_penalty(local: &MlpModel, global: &MlpModel, mu: f64) -> Result<f64> {
    if local.dims() != global.dims() {
        return Err(Error::contract(format!(
            "proximal_penalty shape mismatch: {:?} vs {:?}",
            local.dims(),
            global.dims()
        )));
    }
    let sq: f64 = local
        .params()
        .zip(global.params())
        .map(|(l, g)| (l - g) * (l - g))
        .sum();
    Ok(0.5 * mu * sq)
}

/// Mean activation-regularizer value over the batch, and optionally its
/// gradient w.r.t. the activation rows. Shared by `total_local_loss` and the
/// backward pass so both see bit-identical values. Returns (0, None) when the
/// objective has no activation term, leaving the beta = 0 path identical to
/// FedAvg down to the instruction level.
pub(crate) fn batch_activation_terms(
    trace: &ForwardTrace,
    objective: &LocalObjective,
    with_grad: bool,
) -> (f64, Option<Tensor2D>) {
    if !objective.has_activation_term() {
        return (0.0, None);
    }
    let a = trace.activation();
    let batch = a.rows() as f64;
    let scale = objective.beta / batch;
    let mut grad = with_grad.then(|| Tensor2D::zeros(a.rows(), a.cols()));
    let mut value = 0.0;

    match objective.kind {
        ObjectiveKind::FedL2 => {
            for r in 0..a.rows() {
                let row = a.row(r);
                let n = norm2(row);
                value += scale * n;
                if n > 0.0 {
                    if let Some(g) = grad.as_mut() {
                        for (gv, &av) in g.row_mut(r).iter_mut().zip(row) {
                            *gv = scale * av / n;
                        }
                    }
                }
            }
        }
        ObjectiveKind::FedMax => {
            let cache = trace.softmax_cache();
            let log_d = (a.cols() as f64).ln();
            for r in 0..a.rows() {
                let (row, s_row, lse) = (a.row(r), cache.softmax.row(r), cache.lse[r]);
                match objective.entropy_form {
                    EntropyForm::NegEntropy => {
                        let h = lse - dot(s_row, row);
                        value -= scale * h;
                        if let Some(g) = grad.as_mut() {
                            for ((gv, &sv), &av) in g.row_mut(r).iter_mut().zip(s_row).zip(row) {
                                *gv = scale * sv * ((av - lse) + h);
                            }
                        }
                    }
                    EntropyForm::KlUniform => {
                        let kl: f64 = s_row
                            .iter()
                            .zip(row)
                            .map(|(sv, av)| sv * (av - lse + log_d))
                            .sum();
                        value += scale * kl;
                        if let Some(g) = grad.as_mut() {
                            for ((gv, &sv), &av) in g.row_mut(r).iter_mut().zip(s_row).zip(row) {
                                *gv = scale * sv * ((av - lse + log_d) - kl);
                            }
                        }
                    }
                }
            }
        }
        ObjectiveKind::FedAvg | ObjectiveKind::FedProx => unreachable!(),
    }
    (value, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full local loss for one traced batch: mean cross-entropy, plus the
/// objective's activation regularizer (batch mean), plus the proximal term
/// when the objective is FedProx.
pub fn total_local_loss(
    model: &MlpModel,
    trace: &ForwardTrace,
    labels: &[usize],
    objective: &LocalObjective,
    global: Option<&MlpModel>,
) -> Result<f64> {
    let mut loss = mean_cross_entropy(trace.logits(), labels)?;
    loss += batch_activation_terms(trace, objective, false).0;
    if objective.kind == ObjectiveKind::FedProx {
        let global = global.ok_or_else(|| {
            Error::config("proximal objective requires the round-start global weights")
        })?;
        if objective.mu != 0.0 {
            loss += proximal_penalty(model, global, objective.mu)?;
        }
    }
    Ok(loss)
}
