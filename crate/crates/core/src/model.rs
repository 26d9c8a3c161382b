//! Two-layer perceptron with a manual backward pass.
//!
//! The forward pass records the post-ReLU hidden activations (the inputs to
//! the final fully-connected layer); these are the vectors the activation
//! regularizers and the divergence analysis operate on.

use std::cell::OnceCell;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{softmax_lse, Rng, Tensor2D};
use crate::objectives::{self, LocalObjective, ObjectiveKind};

pub const CHECKPOINT_HEADER: &str = "fedsim-mlp v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpDims {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl MlpDims {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        MlpDims {
            in_dim,
            hidden_dim,
            out_dim,
        }
    }
}

impl Default for MlpDims {
    fn default() -> Self {
        MlpDims::new(1024, 512, 10)
    }
}

/// Perceptron parameters. `w1` is hidden x in, `w2` is out x hidden, so each
/// layer is a plain `x * w^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: MlpDims,
    w1: Tensor2D,
    b1: Vec<f64>,
    w2: Tensor2D,
    b2: Vec<f64>,
}

/// Per-parameter gradients, same shapes as the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Tensor2D,
    pub b1: Vec<f64>,
    pub w2: Tensor2D,
    pub b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            w1: Tensor2D::zeros(model.dims.hidden_dim, model.dims.in_dim),
            b1: vec![0.0; model.dims.hidden_dim],
            w2: Tensor2D::zeros(model.dims.out_dim, model.dims.hidden_dim),
            b2: vec![0.0; model.dims.out_dim],
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .data()
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.data().iter())
            .chain(self.b2.iter())
            .copied()
    }
}

/// Softmax of the activation rows plus the per-row log-sum-exp, computed on
/// first use (only the entropy objective and the similarity analysis need
/// it).
pub struct SoftmaxCache {
    pub softmax: Tensor2D,
    pub lse: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardTrace {
    input: Tensor2D,
    z1: Tensor2D,
    activation: Tensor2D,
    logits: Tensor2D,
    softmax_cache: OnceCell<SoftmaxCache>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn input(&self) -> &Tensor2D {
        &self.input
    }

    pub fn pre_activation(&self) -> &Tensor2D {
        &self.z1
    }

    /// Post-ReLU hidden activations, one row per sample; entries are >= 0.
    pub fn activation(&self) -> &Tensor2D {
        &self.activation
    }

    pub fn logits(&self) -> &Tensor2D {
        &self.logits
    }

    /// Row-wise softmax of the activation vectors; each row is a probability
    /// vector.
    pub fn softmax_activations(&self) -> &Tensor2D {
        &self.softmax_cache().softmax
    }

    pub(crate) fn softmax_cache(&self) -> &SoftmaxCache {
        self.softmax_cache.get_or_init(|| {
            let rows = self.activation.rows();
            let cols = self.activation.cols();
            let mut softmax = Tensor2D::zeros(rows, cols);
            let mut lse = Vec::with_capacity(rows);
            for r in 0..rows {
                let (s, l) = softmax_lse(self.activation.row(r));
                softmax.row_mut(r).copy_from_slice(&s);
                lse.push(l);
            }
            SoftmaxCache { softmax, lse }
        })
    }
}

impl MlpModel {
    pub fn zeros(dims: MlpDims) -> Self {
        MlpModel {
            dims,
            w1: Tensor2D::zeros(dims.hidden_dim, dims.in_dim),
            b1: vec![0.0; dims.hidden_dim],
            w2: Tensor2D::zeros(dims.out_dim, dims.hidden_dim),
            b2: vec![0.0; dims.out_dim],
        }
    }

    /// Training initialization: zero biases, weights i.i.d. normal with
    /// standard deviation 1/sqrt(fan_in). Keeps the initial softmaxed
    /// activations close to uniform so entropy gradients start
    /// well-conditioned.
    pub fn init_random(dims: MlpDims, rng: &mut Rng) -> Self {
        let std1 = 1.0 / (dims.in_dim as f64).sqrt();
        let std2 = 1.0 / (dims.hidden_dim as f64).sqrt();
        MlpModel {
            dims,
            w1: crate::numerics::sample_gaussian(rng, 0.0, std1, dims.hidden_dim, dims.in_dim),
            b1: vec![0.0; dims.hidden_dim],
            w2: crate::numerics::sample_gaussian(rng, 0.0, std2, dims.out_dim, dims.hidden_dim),
            b2: vec![0.0; dims.out_dim],
        }
    }

    pub fn from_parts(w1: Tensor2D, b1: Vec<f64>, w2: Tensor2D, b2: Vec<f64>) -> Result<Self> {
        let dims = MlpDims::new(w1.cols(), w1.rows(), w2.rows());
        if b1.len() != dims.hidden_dim || w2.cols() != dims.hidden_dim || b2.len() != dims.out_dim {
            return Err(Error::contract(format!(
                "inconsistent parameter shapes: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.rows(),
                w1.cols(),
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        Ok(MlpModel {
            dims,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn w1(&self) -> &Tensor2D {
        &self.w1
    }

    pub fn w2(&self) -> &Tensor2D {
        &self.w2
    }

    pub fn param_count(&self) -> usize {
        self.dims.hidden_dim * self.dims.in_dim
            + self.dims.hidden_dim
            + self.dims.out_dim * self.dims.hidden_dim
            + self.dims.out_dim
    }

    /// All parameters in checkpoint order: w1 row-major, b1, w2 row-major,
    /// b2.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .data()
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.data().iter())
            .chain(self.b2.iter())
            .copied()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.w1
            .data_mut()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.data_mut().iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.is_finite()
            && self.b2.iter().all(|v| v.is_finite())
    }

    /// Forward pass over a batch (one sample per row). The trace takes
    /// ownership of the batch; the backward pass reads it back.
    pub fn forward(&self, x: Tensor2D) -> Result<ForwardTrace> {
        if x.cols() != self.dims.in_dim {
            return Err(Error::contract(format!(
                "forward: input has {} columns, model expects {}",
                x.cols(),
                self.dims.in_dim
            )));
        }
        let mut z1 = x.matmul_nt(&self.w1)?;
        for r in 0..z1.rows() {
            for (z, b) in z1.row_mut(r).iter_mut().zip(&self.b1) {
                *z += b;
            }
        }
        let mut activation = z1.clone();
        for v in activation.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mut logits = activation.matmul_nt(&self.w2)?;
        for r in 0..logits.rows() {
            for (l, b) in logits.row_mut(r).iter_mut().zip(&self.b2) {
                *l += b;
            }
        }
        Ok(ForwardTrace {
            input: x,
            z1,
            activation,
            logits,
            softmax_cache: OnceCell::new(),
        })
    }

    /// Loss and exact analytic gradients for one traced batch under the
    /// given objective. `global` carries the round-start weights and is
    /// required exactly when the objective is proximal.
    ///
    /// The loss is assembled from the same helpers as
    /// `objectives::total_local_loss`, so the two agree bitwise.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        labels: &[usize],
        objective: &LocalObjective,
        global: Option<&MlpModel>,
    ) -> Result<(f64, Gradients)> {
        let batch = trace.batch_size();
        if batch == 0 {
            return Err(Error::contract("backward: empty batch"));
        }
        if labels.len() != batch {
            return Err(Error::contract(format!(
                "backward: {} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if trace.activation.cols() != self.dims.hidden_dim || trace.input.cols() != self.dims.in_dim
        {
            return Err(Error::contract(
                "backward: trace was produced by a different model shape",
            ));
        }

        let mut loss = objectives::mean_cross_entropy(&trace.logits, labels)?;

        // d(mean CE)/d(logits) = (softmax(logits) - onehot(label)) / batch.
        let inv_b = 1.0 / batch as f64;
        let mut dlogits = Tensor2D::zeros(batch, self.dims.out_dim);
        for r in 0..batch {
            let (mut s, _) = softmax_lse(trace.logits.row(r));
            s[labels[r]] -= 1.0;
            for v in &mut s {
                *v *= inv_b;
            }
            dlogits.row_mut(r).copy_from_slice(&s);
        }

        let gw2 = dlogits.matmul_tn(&trace.activation)?;
        let mut gb2 = vec![0.0; self.dims.out_dim];
        for r in 0..batch {
            for (g, v) in gb2.iter_mut().zip(dlogits.row(r)) {
                *g += v;
            }
        }

        // Gradient w.r.t. the activation: cross-entropy path through w2 plus
        // the objective's activation-regularizer path.
        let mut da = dlogits.matmul(&self.w2)?;
        let (reg_value, reg_grad) = objectives::batch_activation_terms(trace, objective, true);
        loss += reg_value;
        if let Some(g) = reg_grad {
            da.add_scaled(&g, 1.0)?;
        }

        // ReLU gate: zero where the pre-activation was non-positive.
        for (d, z) in da.data_mut().iter_mut().zip(trace.z1.data()) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        let dz1 = da;

        let gw1 = dz1.matmul_tn(&trace.input)?;
        let mut gb1 = vec![0.0; self.dims.hidden_dim];
        for r in 0..batch {
            for (g, v) in gb1.iter_mut().zip(dz1.row(r)) {
                *g += v;
            }
        }

        let mut grads = Gradients {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        };

        if objective.kind == ObjectiveKind::FedProx {
            let global = global.ok_or_else(|| {
                Error::config("proximal objective requires the round-start global weights")
            })?;
            if objective.mu != 0.0 {
                loss += objectives::proximal_penalty(self, global, objective.mu)?;
                let mu = objective.mu;
                grads.w1.add_scaled(&self.w1, mu)?;
                grads.w1.add_scaled(&global.w1, -mu)?;
                grads.w2.add_scaled(&self.w2, mu)?;
                grads.w2.add_scaled(&global.w2, -mu)?;
                for ((g, l), gl) in grads.b1.iter_mut().zip(&self.b1).zip(&global.b1) {
                    *g += mu * (l - gl);
                }
                for ((g, l), gl) in grads.b2.iter_mut().zip(&self.b2).zip(&global.b2) {
                    *g += mu * (l - gl);
                }
            }
        }

        Ok((loss, grads))
    }

    /// Plain SGD update: p <- p - eta * grad(p).
    pub fn sgd_step(&mut self, grads: &Gradients, eta: f64) {
        assert!(eta > 0.0, "sgd_step: learning rate must be positive");
        for (p, g) in self.w1.data_mut().iter_mut().zip(grads.w1.data()) {
            *p -= eta * g;
        }
        for (p, g) in self.b1.iter_mut().zip(&grads.b1) {
            *p -= eta * g;
        }
        for (p, g) in self.w2.data_mut().iter_mut().zip(grads.w2.data()) {
            *p -= eta * g;
        }
        for (p, g) in self.b2.iter_mut().zip(&grads.b2) {
            *p -= eta * g;
        }
    }

    /// Write a versioned text checkpoint: header, dims, then parameters in a
    /// fixed order (w1 row-major, b1, w2 row-major, b2), one block per line.
    /// f64 values round-trip exactly through the shortest decimal form.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        writeln!(w, "{CHECKPOINT_HEADER}").map_err(io_err)?;
        writeln!(
            w,
            "dims {} {} {}",
            self.dims.in_dim, self.dims.hidden_dim, self.dims.out_dim
        )
        .map_err(io_err)?;
        let write_block = |w: &mut BufWriter<std::fs::File>, vals: &[f64]| -> Result<()> {
            let mut line = String::new();
            for (i, v) in vals.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&format!("{v}"));
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))
        };
        for r in 0..self.w1.rows() {
            write_block(&mut w, self.w1.row(r))?;
        }
        write_block(&mut w, &self.b1)?;
        for r in 0..self.w2.rows() {
            write_block(&mut w, self.w2.row(r))?;
        }
        write_block(&mut w, &self.b2)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let mut next_line = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::parse(path, "unexpected end of checkpoint"))?
                .map_err(|e| Error::io(path, e))
        };
        let header = next_line()?;
        if header != CHECKPOINT_HEADER {
            return Err(Error::parse(path, format!("unknown header '{header}'")));
        }
        let dims_line = next_line()?;
        let fields: Vec<&str> = dims_line.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "dims" {
            return Err(Error::parse(path, "malformed dims line"));
        }
        let parse_dim = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::parse(path, format!("bad dimension '{s}'")))
        };
        let dims = MlpDims::new(
            parse_dim(fields[1])?,
            parse_dim(fields[2])?,
            parse_dim(fields[3])?,
        );

        let mut parse_block = |len: usize| -> Result<Vec<f64>> {
            let line = next_line()?;
            let vals: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(|t| t.parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::parse(path, format!("bad value: {e}")))?;
            if vals.len() != len {
                return Err(Error::parse(
                    path,
                    format!("expected {len} values per line, found {}", vals.len()),
                ));
            }
            Ok(vals)
        };

        let mut w1 = Tensor2D::zeros(dims.hidden_dim, dims.in_dim);
        for r in 0..dims.hidden_dim {
            w1.row_mut(r).copy_from_slice(&parse_block(dims.in_dim)?);
        }
        let b1 = parse_block(dims.hidden_dim)?;
        let mut w2 = Tensor2D::zeros(dims.out_dim, dims.hidden_dim);
        for r in 0..dims.out_dim {
            w2.row_mut(r)
                .copy_from_slice(&parse_block(dims.hidden_dim)?);
        }
        let b2 = parse_block(dims.out_dim)?;
        MlpModel::from_parts(w1, b1, w2, b2)
    }
}
