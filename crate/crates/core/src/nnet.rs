//! Shared-encoder multi-task regression network.
//!
//! A fully connected encoder feeds K linear scalar heads. Per-task losses are
//! mean squared errors over the samples measured for that task, and
//! per-task gradients are taken with respect to the encoder parameters only,
//! flattened layer by layer (row-major weights, then bias).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conflict::{conflict_matrix, ConflictSink};
use crate::paneldata::TaskPanel;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnetError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("invalid training configuration: {0}")]
    TrainConfig(String),
    #[error("no valid samples for task {task}")]
    NoValidSamples { task: usize },
    #[error("task {task} out of range for a {n_tasks}-task network")]
    TaskOutOfRange { task: usize, n_tasks: usize },
    #[error("panel has {panel} features but the network expects {network}")]
    InputMismatch { panel: usize, network: usize },
    #[error("panel has {panel} tasks but the network has {network} heads")]
    TaskCountMismatch { panel: usize, network: usize },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("panel has no labelled samples")]
    EmptyPanel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Encoder widths and head count. The activation follows every encoder
/// layer, including the last, so the representation is bounded for tanh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_tasks: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    /// `[input_dim → 32 → 16]` tanh encoder.
    pub fn standard(input_dim: usize, n_tasks: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![32, 16],
            n_tasks,
            activation: Activation::Tanh,
        }
    }

    fn validate(&self) -> Result<(), NnetError> {
        if self.input_dim == 0 {
            return Err(NnetError::Config("input dimension is 0".into()));
        }
        if self.hidden.is_empty() {
            return Err(NnetError::Config("encoder needs at least one layer".into()));
        }
        if let Some(pos) = self.hidden.iter().position(|&h| h == 0) {
            return Err(NnetError::Config(format!("encoder layer {pos} has width 0")));
        }
        // Single-head networks are allowed: they are the single-task baselines.
        if self.n_tasks == 0 {
            return Err(NnetError::Config("network needs at least one task head".into()));
        }
        Ok(())
    }

    pub fn repr_dim(&self) -> usize {
        *self.hidden.last().expect("validated architecture")
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    in_dim: usize,
    out_dim: usize,
    /// out_dim × in_dim, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    weights: Vec<f64>,
    bias: f64,
}

/// Shared encoder plus one linear head per task.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Dense>,
    heads: Vec<Head>,
    seed: u64,
}

/// Per-task encoder gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub task_id: usize,
    /// Number of measured samples the gradient averages over.
    pub n_samples: usize,
}

impl GradientVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, count: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Network {
    /// Deterministic Glorot-uniform initialisation; biases start at 0.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self, NnetError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.hidden.len());
        let mut in_dim = arch.input_dim;
        for &out_dim in &arch.hidden {
            layers.push(Dense {
                in_dim,
                out_dim,
                weights: glorot(&mut rng, in_dim, out_dim, in_dim * out_dim),
                bias: vec![0.0; out_dim],
            });
            in_dim = out_dim;
        }
        let heads = (0..arch.n_tasks)
            .map(|_| Head {
                weights: glorot(&mut rng, in_dim, 1, in_dim),
                bias: 0.0,
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            layers,
            heads,
            seed,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Encoder parameters in gradient order.
    pub fn encoder_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.encoder_param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_encoder_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.encoder_param_count(), "encoder parameter length");
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
    }

    /// Every parameter, encoder first, then each head's weights and bias.
    pub fn all_params(&self) -> Vec<f64> {
        let mut out = self.encoder_params();
        for h in &self.heads {
            out.extend_from_slice(&h.weights);
            out.push(h.bias);
        }
        out
    }

    fn check_panel(&self, panel: &TaskPanel) -> Result<(), NnetError> {
        if panel.n_features() != self.arch.input_dim {
            return Err(NnetError::InputMismatch {
                panel: panel.n_features(),
                network: self.arch.input_dim,
            });
        }
        if panel.n_tasks() != self.n_tasks() {
            return Err(NnetError::TaskCountMismatch {
                panel: panel.n_tasks(),
                network: self.n_tasks(),
            });
        }
        Ok(())
    }

    fn check_task(&self, task: usize) -> Result<(), NnetError> {
        if task >= self.n_tasks() {
            return Err(NnetError::TaskOutOfRange {
                task,
                n_tasks: self.n_tasks(),
            });
        }
        Ok(())
    }

    /// One forward pass over `samples`, keeping every layer's activations.
    pub fn forward<'p>(&self, panel: &'p TaskPanel, samples: &[usize]) -> Result<ForwardPass<'_, 'p>, NnetError> {
        self.check_panel(panel)?;
        let batch = samples.len();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut input = Vec::with_capacity(batch * self.arch.input_dim);
        for &s in samples {
            input.extend_from_slice(panel.features(s));
        }
        acts.push(input);
        for layer in &self.layers {
            let prev = acts.last().expect("input layer present");
            let mut out = Vec::with_capacity(batch * layer.out_dim);
            for b in 0..batch {
                let x = &prev[b * layer.in_dim..(b + 1) * layer.in_dim];
                for o in 0..layer.out_dim {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let u = layer.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                    out.push(self.arch.activation.apply(u));
                }
            }
            acts.push(out);
        }
        let repr = acts.last().expect("encoder output");
        let d = self.arch.repr_dim();
        let k = self.n_tasks();
        let mut preds = Vec::with_capacity(batch * k);
        for b in 0..batch {
            let z = &repr[b * d..(b + 1) * d];
            for h in &self.heads {
                preds.push(h.bias + h.weights.iter().zip(z).map(|(w, v)| w * v).sum::<f64>());
            }
        }
        Ok(ForwardPass {
            net: self,
            panel,
            samples: samples.to_vec(),
            acts,
            preds,
        })
    }

    /// Predictions for every sample, row-major N×K.
    pub fn predict(&self, panel: &TaskPanel) -> Result<Vec<f64>, NnetError> {
        let all: Vec<usize> = (0..panel.n_samples()).collect();
        Ok(self.forward(panel, &all)?.preds)
    }

    fn apply_update(&mut self, encoder_grad: &[f64], head_grads: &[(Vec<f64>, f64)], lr: f64) {
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w -= lr * encoder_grad[offset];
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b -= lr * encoder_grad[offset];
                offset += 1;
            }
        }
        for (h, (gw, gb)) in self.heads.iter_mut().zip(head_grads) {
            for (w, g) in h.weights.iter_mut().zip(gw) {
                *w -= lr * g;
            }
            h.bias -= lr * gb;
        }
    }

    fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
            && self
                .heads
                .iter()
                .all(|h| h.bias.is_finite() && h.weights.iter().all(|v| v.is_finite()))
    }
}

/// Cached activations of one batch, from which any number of per-task
/// backward passes can be taken.
pub struct ForwardPass<'n, 'p> {
    net: &'n Network,
    panel: &'p TaskPanel,
    samples: Vec<usize>,
    acts: Vec<Vec<f64>>,
    preds: Vec<f64>,
}

impl ForwardPass<'_, '_> {
    pub fn predictions(&self) -> &[f64] {
        &self.preds
    }

    /// `(batch row, residual)` for every measured sample of `task`.
    fn residuals(&self, task: usize) -> Vec<(usize, f64)> {
        let k = self.net.n_tasks();
        self.samples
            .iter()
            .enumerate()
            .filter_map(|(b, &s)| self.panel.label(s, task).map(|y| (b, self.preds[b * k + task] - y)))
            .collect()
    }

    /// Number of batch rows measured for `task`.
    pub fn valid_count(&self, task: usize) -> usize {
        self.samples.iter().filter(|&&s| self.panel.is_measured(s, task)).count()
    }

    /// Masked mean squared error of `task` over the batch.
    pub fn task_loss(&self, task: usize) -> Result<f64, NnetError> {
        self.net.check_task(task)?;
        let res = self.residuals(task);
        if res.is_empty() {
            return Err(NnetError::NoValidSamples { task });
        }
        Ok(res.iter().map(|(_, r)| r * r).sum::<f64>() / res.len() as f64)
    }

    /// Encoder gradient of `loss_scale · L_task`.
    pub fn task_gradient_scaled(&self, task: usize, loss_scale: f64) -> Result<GradientVector, NnetError> {
        self.net.check_task(task)?;
        let res = self.residuals(task);
        if res.is_empty() {
            return Err(NnetError::NoValidSamples { task });
        }
        let d = self.net.arch.repr_dim();
        let head = &self.net.heads[task].weights;
        let mut repr_grad = vec![0.0; self.samples.len() * d];
        let scale = 2.0 * loss_scale / res.len() as f64;
        for &(b, r) in &res {
            let g = scale * r;
            for (dst, w) in repr_grad[b * d..(b + 1) * d].iter_mut().zip(head) {
                *dst = g * w;
            }
        }
        Ok(GradientVector {
            values: self.encoder_backward(repr_grad),
            task_id: task,
            n_samples: res.len(),
        })
    }

    pub fn task_gradient(&self, task: usize) -> Result<GradientVector, NnetError> {
        self.task_gradient_scaled(task, 1.0)
    }

    /// Backpropagates a gradient on the representation through the encoder.
    fn encoder_backward(&self, mut delta: Vec<f64>) -> Vec<f64> {
        let net = self.net;
        let batch = self.samples.len();
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len());
        for (li, layer) in net.layers.iter().enumerate().rev() {
            let out_act = &self.acts[li + 1];
            let in_act = &self.acts[li];
            for (dv, a) in delta.iter_mut().zip(out_act) {
                *dv *= net.arch.activation.derivative_from_output(*a);
            }
            let mut gw = vec![0.0; layer.weights.len()];
            let mut gb = vec![0.0; layer.out_dim];
            for b in 0..batch {
                let du = &delta[b * layer.out_dim..(b + 1) * layer.out_dim];
                let x = &in_act[b * layer.in_dim..(b + 1) * layer.in_dim];
                for (o, &g) in du.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    for (dst, xv) in gw[o * layer.in_dim..(o + 1) * layer.in_dim].iter_mut().zip(x) {
                        *dst += g * xv;
                    }
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; batch * layer.in_dim];
                for b in 0..batch {
                    let du = &delta[b * layer.out_dim..(b + 1) * layer.out_dim];
                    let dst = &mut prev[b * layer.in_dim..(b + 1) * layer.in_dim];
                    for (o, &g) in du.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (p, w) in dst.iter_mut().zip(row) {
                            *p += g * w;
                        }
                    }
                }
                delta = prev;
            }
            gw.extend_from_slice(&gb);
            grads.push(gw);
        }
        grads.reverse();
        grads.concat()
    }

    /// Sum of per-task losses over tasks present in the batch, with the
    /// matching gradients for encoder and heads. `None` when no task has a
    /// measured sample in the batch.
    #[allow(clippy::type_complexity)]
    fn total_loss_and_gradient(&self) -> Option<(f64, Vec<f64>, Vec<(Vec<f64>, f64)>)> {
        let net = self.net;
        let d = net.arch.repr_dim();
        let repr = self.acts.last().expect("encoder output");
        let mut repr_grad = vec![0.0; self.samples.len() * d];
        let mut head_grads: Vec<(Vec<f64>, f64)> = net.heads.iter().map(|_| (vec![0.0; d], 0.0)).collect();
        let mut total = 0.0;
        let mut any = false;
        for (task, head) in net.heads.iter().enumerate() {
            let res = self.residuals(task);
            if res.is_empty() {
                continue;
            }
            any = true;
            let n = res.len() as f64;
            total += res.iter().map(|(_, r)| r * r).sum::<f64>() / n;
            let (gw, gb) = &mut head_grads[task];
            for &(b, r) in &res {
                let g = 2.0 * r / n;
                *gb += g;
                let z = &repr[b * d..(b + 1) * d];
                for ((dw, zv), (dr, w)) in gw
                    .iter_mut()
                    .zip(z)
                    .zip(repr_grad[b * d..(b + 1) * d].iter_mut().zip(&head.weights))
                {
                    *dw += g * zv;
                    *dr += g * w;
                }
            }
        }
        if !any {
            return None;
        }
        Some((total, self.encoder_backward(repr_grad), head_grads))
    }
}

/// Masked mean squared error of `task` over the measured subset of `samples`.
pub fn masked_task_loss(
    network: &Network,
    panel: &TaskPanel,
    task: usize,
    samples: &[usize],
) -> Result<f64, NnetError> {
    network.forward(panel, samples)?.task_loss(task)
}

/// Encoder gradient of the masked loss of `task`, averaged over the measured
/// subset of `samples`. Head parameters are excluded.
pub fn task_gradient(
    network: &Network,
    panel: &TaskPanel,
    task: usize,
    samples: &[usize],
) -> Result<GradientVector, NnetError> {
    network.forward(panel, samples)?.task_gradient(task)
}

/// Optimiser and gradient-logging schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub log_interval_steps: usize,
    pub averaging_window_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 32,
            log_interval_steps: 10,
            averaging_window_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        let bad = |m: &str| Err(NnetError::TrainConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.log_interval_steps == 0 {
            return bad("log_interval_steps must be at least 1");
        }
        if !(self.averaging_window_fraction > 0.0 && self.averaging_window_fraction <= 1.0) {
            return bad("averaging_window_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }
}

/// Mini-batch SGD on the sum of masked task losses.
///
/// Steps are numbered from 0. On every step divisible by
/// `log_interval_steps`, per-task encoder gradients are taken on the current
/// batch (before the parameter update) and their conflict matrix is passed
/// to `sink`. Tasks without measured samples in the batch are marked
/// invalid in that step's matrix.
pub fn train<S: ConflictSink + ?Sized>(
    mut network: Network,
    panel: &TaskPanel,
    cfg: &TrainConfig,
    sink: &mut S,
) -> Result<Network, NnetError> {
    cfg.validate()?;
    network.check_panel(panel)?;
    let mut order = panel.labelled_samples();
    if order.is_empty() {
        return Err(NnetError::EmptyPanel);
    }
    let k = network.n_tasks();
    sink.set_total_steps(cfg.epochs * cfg.steps_per_epoch(order.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let pass = network.forward(panel, batch)?;
            let Some((loss, enc_grad, head_grads)) = pass.total_loss_and_gradient() else {
                step += 1;
                continue;
            };
            if !loss.is_finite() {
                return Err(NnetError::Diverged { step });
            }
            if step.is_multiple_of(cfg.log_interval_steps) && sink.wants_records() {
                let grads: Vec<GradientVector> = (0..k)
                    .filter(|&t| pass.valid_count(t) > 0)
                    .map(|t| pass.task_gradient(t))
                    .collect::<Result<_, _>>()?;
                let matrix = conflict_matrix(k, &grads).expect("gradients share one encoder layout");
                sink.record(step, matrix);
            }
            drop(pass);
            network.apply_update(&enc_grad, &head_grads, cfg.learning_rate);
            if !network.params_finite() {
                return Err(NnetError::Diverged { step });
            }
            step += 1;
        }
    }
    Ok(network)
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub n_params: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Compares the analytic encoder gradient with central finite differences of
/// the masked loss, coordinate by coordinate.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-7)`; the floor keeps
/// coordinates whose true gradient is zero from dominating.
pub fn gradient_check(
    network: &Network,
    panel: &TaskPanel,
    task: usize,
    samples: &[usize],
    tolerance: f64,
) -> Result<GradientCheckReport, NnetError> {
    gradient_check_with_step(network, panel, task, samples, tolerance, FD_STEP)
}

/// [`gradient_check`] with an explicit finite-difference step.
pub fn gradient_check_with_step(
    network: &Network,
    panel: &TaskPanel,
    task: usize,
    samples: &[usize],
    tolerance: f64,
    step: f64,
) -> Result<GradientCheckReport, NnetError> {
    let analytic = task_gradient(network, panel, task, samples)?;
    let base = network.encoder_params();
    let mut probe = network.clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut params = base.clone();
    for (p, &a) in analytic.values.iter().enumerate() {
        params[p] = base[p] + step;
        probe.set_encoder_params(&params);
        let up = masked_task_loss(&probe, panel, task, samples)?;
        params[p] = base[p] - step;
        probe.set_encoder_params(&params);
        let down = masked_task_loss(&probe, panel, task, samples)?;
        params[p] = base[p];
        let numeric = (up - down) / (2.0 * step);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-7);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradientCheckReport {
        max_relative_error: max_rel,
        max_abs_error: max_abs,
        n_params: analytic.values.len(),
        tolerance,
        passed: max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conflict::{ConflictAccumulator, NullSink};
    use crate::paneldata::{generate_panel, PanelSpec};

    fn small_panel(n: usize, seed: u64) -> TaskPanel {
        let spec = PanelSpec {
            n_samples: n,
            n_latent: 8,
            n_tasks: 4,
            ..PanelSpec::default()
        };
        generate_panel(&spec, seed).unwrap().0
    }

    fn arch() -> Architecture {
        Architecture {
            input_dim: 8,
            hidden: vec![16, 8],
            n_tasks: 4,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Network::new(&arch(), 7).unwrap();
        let b = Network::new(&arch(), 7).unwrap();
        assert_eq!(a.all_params(), b.all_params());
        let c = Network::new(&arch(), 8).unwrap();
        assert_ne!(a.all_params(), c.all_params());
        assert_eq!(a.encoder_param_count(), c.encoder_param_count());
        assert_eq!(a.encoder_param_count(), 8 * 16 + 16 + 16 * 8 + 8);
    }

    #[test]
    fn zero_width_layer_is_rejected() {
        let mut bad = arch();
        bad.hidden = vec![16, 0];
        assert!(matches!(Network::new(&bad, 1), Err(NnetError::Config(_))));
    }

    #[test]
    fn loss_of_two_unit_residuals() {
        // One feature, identity encoder of width 1 with weight 1, head weight 1:
        // prediction equals the feature.
        let panel = TaskPanel::new(
            1,
            vec![1.0, 2.0, 5.0],
            vec![0.0, 0.0, 3.0, 0.0, 0.0, 0.0],
            vec![true, true, true, false, false, true],
            vec!["a".into(), "b".into()],
            vec!["0".into(), "1".into(), "2".into()],
        )
        .unwrap();
        let mut net = Network::new(
            &Architecture {
                input_dim: 1,
                hidden: vec![1],
                n_tasks: 2,
                activation: Activation::Identity,
            },
            0,
        )
        .unwrap();
        net.set_encoder_params(&[1.0, 0.0]);
        net.heads[0] = Head { weights: vec![1.0], bias: 0.0 };
        // task 0 measured on samples 0 and 1 with labels 0 and 3: residuals 1 and -1
        let loss = masked_task_loss(&net, &panel, 0, &[0, 1, 2]).unwrap();
        assert_eq!(loss, 1.0);
        // sample 2 is only measured for task 1
        assert_eq!(
            masked_task_loss(&net, &panel, 0, &[2]),
            Err(NnetError::NoValidSamples { task: 0 })
        );
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        let panel = small_panel(40, 3);
        let net = Network::new(&arch(), 1).unwrap();
        let preds = net.predict(&panel).unwrap();
        let k = panel.n_tasks();
        let n = panel.n_samples();
        let mut labels = Vec::new();
        for i in 0..n {
            labels.extend((0..k).map(|t| preds[i * k + t]));
        }
        let fitted = TaskPanel::new(
            8,
            (0..n).flat_map(|i| panel.features(i).to_vec()).collect(),
            labels,
            vec![true; n * k],
            panel.task_names().to_vec(),
            panel.sample_ids().to_vec(),
        )
        .unwrap();
        let ids: Vec<usize> = (0..n).collect();
        assert_eq!(masked_task_loss(&net, &fitted, 2, &ids).unwrap(), 0.0);
    }

    #[test]
    fn zero_input_column_has_zero_gradient() {
        let base = small_panel(30, 4);
        let n = base.n_samples();
        let mut features: Vec<f64> = (0..n).flat_map(|i| base.features(i).to_vec()).collect();
        for i in 0..n {
            features[i * 8 + 3] = 0.0;
        }
        let panel = TaskPanel::new(
            8,
            features,
            vec![0.0; n * 4],
            vec![true; n * 4],
            base.task_names().to_vec(),
            base.sample_ids().to_vec(),
        )
        .unwrap();
        let net = Network::new(&arch(), 2).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        let g = task_gradient(&net, &panel, 1, &ids).unwrap();
        for o in 0..16 {
            assert_eq!(g.values[o * 8 + 3], 0.0);
        }
    }

    #[test]
    fn duplicated_samples_leave_gradient_unchanged() {
        let panel = small_panel(25, 5);
        let net = Network::new(&arch(), 3).unwrap();
        let ids: Vec<usize> = (0..25).collect();
        let doubled: Vec<usize> = ids.iter().flat_map(|&i| [i, i]).collect();
        let a = task_gradient(&net, &panel, 0, &ids).unwrap();
        let b = task_gradient(&net, &panel, 0, &doubled).unwrap();
        assert_eq!(b.n_samples, 50);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn loss_scale_scales_gradient() {
        let panel = small_panel(20, 6);
        let net = Network::new(&arch(), 4).unwrap();
        let ids: Vec<usize> = (0..20).collect();
        let pass = net.forward(&panel, &ids).unwrap();
        let g = pass.task_gradient(2).unwrap();
        let g2 = pass.task_gradient_scaled(2, 2.0).unwrap();
        let g3 = pass.task_gradient_scaled(2, -3.0).unwrap();
        let scale = g.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for ((a, b), c) in g.values.iter().zip(&g2.values).zip(&g3.values) {
            assert_eq!(*b, 2.0 * a);
            assert!((c + 3.0 * a).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn gradient_check_passes_and_zero_tolerance_fails() {
        let panel = small_panel(16, 7);
        let net = Network::new(&arch(), 5).unwrap();
        let ids: Vec<usize> = (0..16).collect();
        let ok = gradient_check(&net, &panel, 0, &ids, 1e-4).unwrap();
        assert!(ok.passed, "{ok:?}");
        let strict = gradient_check(&net, &panel, 0, &ids, 0.0).unwrap();
        assert!(!strict.passed);
    }

    #[test]
    fn linear_network_finite_differences_are_near_exact() {
        let panel = small_panel(16, 8);
        let mut a = arch();
        a.activation = Activation::Identity;
        let net = Network::new(&a, 6).unwrap();
        let ids: Vec<usize> = (0..16).collect();
        // The loss is quadratic along every encoder coordinate, so central
        // differences are exact up to rounding and a wide step keeps that small.
        let r = gradient_check_with_step(&net, &panel, 3, &ids, 1e-8, 1e-2).unwrap();
        assert!(r.max_relative_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn training_reduces_loss_on_realizable_problem() {
        let spec = PanelSpec {
            n_samples: 500,
            noise_sd: 0.0,
            ..PanelSpec::default()
        };
        let (panel, _) = generate_panel(&spec, 10).unwrap();
        let arch = Architecture::standard(10, 8);
        let net = Network::new(&arch, 1).unwrap();
        let ids: Vec<usize> = (0..panel.n_samples()).collect();
        let total = |n: &Network| -> f64 {
            (0..8).map(|t| masked_task_loss(n, &panel, t, &ids).unwrap()).sum()
        };
        let before = total(&net);
        let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
        let trained = train(net, &panel, &cfg, &mut NullSink).unwrap();
        let after = total(&trained);
        assert!(after < 0.25 * before, "{before} -> {after}");
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let panel = small_panel(200, 11);
        let net = Network::new(&arch(), 1).unwrap();
        let cfg = TrainConfig { learning_rate: 1e6, ..TrainConfig::default() };
        assert!(matches!(
            train(net, &panel, &cfg, &mut NullSink),
            Err(NnetError::Diverged { .. })
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let panel = small_panel(200, 12);
        let cfg = TrainConfig { epochs: 5, seed: 9, ..TrainConfig::default() };
        let run = || {
            let mut acc = ConflictAccumulator::new(cfg.averaging_window_fraction);
            let net = train(Network::new(&arch(), 3).unwrap(), &panel, &cfg, &mut acc).unwrap();
            (net.all_params(), acc)
        };
        let (p1, a1) = run();
        let (p2, a2) = run();
        assert_eq!(p1, p2);
        assert_eq!(a1, a2);
        assert!(!a1.records().is_empty());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { averaging_window_fraction: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
