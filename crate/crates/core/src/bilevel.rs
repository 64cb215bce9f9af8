//! Learning per-sample training weights that make the model's confidence
//! self-calibrated.
//!
//! The inner problem is weighted cross-entropy on the training split, solved
//! approximately by `T` unrolled gradient-descent steps recorded on a tape.
//! The outer problem is binary cross-entropy between the confidence output
//! and per-sample correctness on the validation split. One reverse sweep
//! through the unroll gives the gradient of the outer loss with respect to
//! the weights.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, checkpointed_vjp, CheckpointPlan, NodeId, Tape};
use crate::data::LabeledDataset;
use crate::model::{forward_batch, init_params, MlpArchitecture, MlpParams, ParamNodes};
use crate::optim::{adam_step, gd_step, gd_step_on_tape, AdamConfig, AdamState, GdConfig};
use crate::{Error, Result, Tensor};

pub const DEFAULT_CLAMP_EPS: f64 = 1e-7;

/// One weight per training sample, kept in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights(Vec<f64>);

impl SampleWeights {
    pub fn ones(n: usize) -> Self {
        SampleWeights(vec![1.0; n])
    }

    /// Accepts any finite values; call [`SampleWeights::project`] to clip.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|w| w.is_finite()) {
            Ok(SampleWeights(values))
        } else {
            Err(Error::NonFinite {
                op: "sample_weights",
            })
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn project(&mut self) {
        for w in &mut self.0 {
            *w = w.clamp(0.0, 1.0);
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.0.len()], self.0.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilevelConfig {
    /// Unrolled gradient-descent steps per outer iteration.
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Zero freezes the weights at one.
    pub outer_lr: f64,
    pub outer_iterations: usize,
    /// Carry the inner parameters across outer iterations instead of
    /// re-initialising them every time.
    pub warm_start: bool,
    /// Probabilities are clamped to `[eps, 1 - eps]` before every log.
    pub clamp_eps: f64,
    /// Store a copy of the weights every `snapshot_stride` outer iterations.
    pub snapshot_stride: usize,
    /// Recompute the unroll in segments of this many steps on the backward
    /// pass instead of keeping the whole tape.
    pub checkpoint_every: Option<usize>,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            inner_steps: 10,
            inner_lr: 0.5,
            outer_lr: 3.0,
            outer_iterations: 100,
            warm_start: true,
            clamp_eps: DEFAULT_CLAMP_EPS,
            snapshot_stride: 10,
            checkpoint_every: None,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::InvalidArgument(alloc::format!(
                "bilevel config: {what}"
            )))
        };
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return bad("inner_lr must be positive");
        }
        if !(self.outer_lr >= 0.0 && self.outer_lr.is_finite()) {
            return bad("outer_lr must be non-negative");
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return bad("clamp_eps must lie in (0, 0.5)");
        }
        if self.snapshot_stride == 0 {
            return bad("snapshot_stride must be at least 1");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be at least 1");
        }
        Ok(())
    }
}

/// A dataset's features and one-hot labels as constants on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeBatch {
    pub features: NodeId,
    pub one_hot: NodeId,
    pub len: usize,
}

impl TapeBatch {
    pub fn new(tape: &mut Tape, data: &LabeledDataset) -> Self {
        TapeBatch {
            features: tape.constant(data.features.clone()),
            one_hot: tape.constant(data.one_hot()),
            len: data.len(),
        }
    }
}

/// `(1/n) sum_i w_i * -log(clamp(p_{i, y_i}, eps, 1))`.
pub fn inner_loss(
    tape: &mut Tape,
    arch: &MlpArchitecture,
    params: &ParamNodes,
    batch: &TapeBatch,
    weights: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let w = tape.value(weights);
    if w.rank() != 1 || w.len() != batch.len {
        return Err(Error::SizeMismatch {
            expected: batch.len,
            got: w.len(),
        });
    }
    if batch.len == 0 {
        return Err(Error::EmptyInput("inner loss"));
    }
    let out = forward_batch(tape, arch, params, batch.features)?;
    let picked = tape.mul(out.probs, batch.one_hot)?;
    let p_true = tape.sum_rows(picked)?;
    let p_true = tape.clamp(p_true, eps, 1.0)?;
    let log_p = tape.log(p_true)?;
    let weighted = tape.mul(log_p, weights)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / batch.len as f64)
}

/// Outer loss node together with the correctness targets it was built on.
#[derive(Clone, Debug)]
pub struct OuterLoss {
    pub loss: NodeId,
    pub correct: Vec<bool>,
}

impl OuterLoss {
    pub fn accuracy(&self) -> f64 {
        let hits = self.correct.iter().filter(|&&c| c).count();
        hits as f64 / self.correct.len() as f64
    }
}

/// Mean binary cross-entropy between the clamped confidence and whether the
/// current model classifies each sample correctly. The correctness targets
/// are constants: no gradient passes through the argmax.
pub fn outer_loss(
    tape: &mut Tape,
    arch: &MlpArchitecture,
    params: &ParamNodes,
    batch: &TapeBatch,
    labels: &[usize],
    eps: f64,
) -> Result<OuterLoss> {
    outer_loss_with_targets(tape, arch, params, batch, labels, None, eps)
}

/// Like [`outer_loss`], but `targets` (when given) replaces the correctness
/// computed from the current model.
pub fn outer_loss_with_targets(
    tape: &mut Tape,
    arch: &MlpArchitecture,
    params: &ParamNodes,
    batch: &TapeBatch,
    labels: &[usize],
    targets: Option<&[bool]>,
    eps: f64,
) -> Result<OuterLoss> {
    if batch.len == 0 {
        return Err(Error::EmptyInput("validation set"));
    }
    if labels.len() != batch.len {
        return Err(Error::SizeMismatch {
            expected: batch.len,
            got: labels.len(),
        });
    }
    let out = forward_batch(tape, arch, params, batch.features)?;
    let correct: Vec<bool> = match targets {
        Some(t) if t.len() != batch.len => {
            return Err(Error::SizeMismatch {
                expected: batch.len,
                got: t.len(),
            })
        }
        Some(t) => t.to_vec(),
        None => {
            let probs = tape.value(out.probs);
            labels
                .iter()
                .enumerate()
                .map(|(r, &y)| argmax(probs.row(r)) == y)
                .collect()
        }
    };
    let y: Vec<f64> = correct.iter().map(|&c| f64::from(u8::from(c))).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = tape.constant(Tensor::from_parts(vec![batch.len], y));
    let not_y = tape.constant(Tensor::from_parts(vec![batch.len], not_y));

    let p = tape.clamp(out.confidence, eps, 1.0 - eps)?;
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.log(q)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll)?;
    let loss = tape.scale(mean, -1.0)?;
    Ok(OuterLoss { loss, correct })
}

fn divergence(err: Error, inner_step: Option<usize>) -> Error {
    match err {
        Error::NonFinite { op } => Error::Divergence {
            outer_iteration: 0,
            inner_step,
            op,
        },
        other => other,
    }
}

/// Records `steps` gradient-descent steps on the inner loss. Every step
/// stays on the tape, so the returned parameters depend differentiably on
/// `weights`.
#[allow(clippy::too_many_arguments)]
pub fn unroll_inner(
    tape: &mut Tape,
    arch: &MlpArchitecture,
    theta0: &ParamNodes,
    weights: NodeId,
    batch: &TapeBatch,
    steps: usize,
    step_size: f64,
    eps: f64,
) -> Result<ParamNodes> {
    let mut theta = theta0.clone();
    for t in 0..steps {
        theta = inner_gd_step(tape, arch, &theta, weights, batch, step_size, eps)
            .map_err(|e| divergence(e, Some(t)))?;
    }
    Ok(theta)
}

fn inner_gd_step(
    tape: &mut Tape,
    arch: &MlpArchitecture,
    theta: &ParamNodes,
    weights: NodeId,
    batch: &TapeBatch,
    step_size: f64,
    eps: f64,
) -> Result<ParamNodes> {
    let loss = inner_loss(tape, arch, theta, batch, weights, eps)?;
    let grads = tape.grad_on_tape(loss, &theta.ids())?;
    gd_step_on_tape(tape, theta, &grads, step_size)
}

/// Result of one hypergradient evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient {
    /// Gradient of the outer loss with respect to each sample weight.
    pub grad: Vec<f64>,
    /// Inner parameters after the unroll.
    pub params: MlpParams,
    /// Inner loss at the unrolled parameters.
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub val_accuracy: f64,
}

fn check_inputs(
    arch: &MlpArchitecture,
    weights: &SampleWeights,
    theta0: &MlpParams,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<()> {
    arch.validate()?;
    theta0.check(arch)?;
    if weights.len() != train.len() {
        return Err(Error::SizeMismatch {
            expected: train.len(),
            got: weights.len(),
        });
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    Ok(())
}

/// Gradient of the outer loss at `theta^T(w)` with respect to `w`, where
/// `theta^T` is `cfg.inner_steps` gradient-descent steps from `theta0`.
///
/// `inner_steps = 0` is allowed and yields a zero gradient. When
/// `cfg.checkpoint_every` is set the unroll is recomputed segment by segment
/// on the backward pass.
pub fn hypergradient(
    arch: &MlpArchitecture,
    weights: &SampleWeights,
    theta0: &MlpParams,
    cfg: &BilevelConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<Hypergradient> {
    check_inputs(arch, weights, theta0, train, val)?;
    match cfg.checkpoint_every {
        Some(every) => hypergradient_checkpointed(
            arch,
            weights,
            theta0,
            cfg,
            train,
            val,
            &CheckpointPlan::every(cfg.inner_steps, every),
        ),
        None => hypergradient_full(arch, weights, theta0, cfg, train, val),
    }
}

fn hypergradient_full(
    arch: &MlpArchitecture,
    weights: &SampleWeights,
    theta0: &MlpParams,
    cfg: &BilevelConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<Hypergradient> {
    let eps = cfg.clamp_eps;
    let mut tape = Tape::new();
    let w = tape.leaf(weights.to_tensor());
    let theta = theta0.to_constants(&mut tape);
    let train_batch = TapeBatch::new(&mut tape, train);
    let val_batch = TapeBatch::new(&mut tape, val);
    let theta_t = unroll_inner(
        &mut tape,
        arch,
        &theta,
        w,
        &train_batch,
        cfg.inner_steps,
        cfg.inner_lr,
        eps,
    )?;
    let outer = outer_loss(&mut tape, arch, &theta_t, &val_batch, &val.labels, eps)
        .map_err(|e| divergence(e, None))?;
    let mut grads = tape.backward(outer.loss, &[w])?;
    let grad = grads.remove(w).expect("requested gradient").into_data();
    let params = theta_t.values(&tape);
    Ok(Hypergradient {
        grad,
        inner_loss: inner_loss_value(arch, &params, train, weights, eps)?,
        outer_loss: tape.value(outer.loss).item()?,
        val_accuracy: outer.accuracy(),
        params,
    })
}

/// Same quantity as [`hypergradient`], computed with an explicit
/// checkpoint plan over the inner steps.
pub fn hypergradient_checkpointed(
    arch: &MlpArchitecture,
    weights: &SampleWeights,
    theta0: &MlpParams,
    cfg: &BilevelConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    plan: &CheckpointPlan,
) -> Result<Hypergradient> {
    check_inputs(arch, weights, theta0, train, val)?;
    if plan.steps() != cfg.inner_steps {
        return Err(Error::SizeMismatch {
            expected: cfg.inner_steps,
            got: plan.steps(),
        });
    }
    let eps = cfg.clamp_eps;
    let mut accuracy = 0.0;
    let out = checkpointed_vjp(
        plan,
        &theta0.tensors().into_iter().cloned().collect::<Vec<_>>(),
        &[weights.to_tensor()],
        |tape, state, params, t| {
            let batch = TapeBatch::new(tape, train);
            let theta = ParamNodes::from_ids(state);
            let next = inner_gd_step(tape, arch, &theta, params[0], &batch, cfg.inner_lr, eps)
                .map_err(|e| divergence(e, Some(t)))?;
            Ok(next.ids())
        },
        |tape, state, _params| {
            let batch = TapeBatch::new(tape, val);
            let theta = ParamNodes::from_ids(state);
            let outer = outer_loss(tape, arch, &theta, &batch, &val.labels, eps)
                .map_err(|e| divergence(e, None))?;
            accuracy = outer.accuracy();
            Ok(outer.loss)
        },
    )?;
    let params = MlpParams::from_tensors(out.final_state)?;
    let grad = out
        .params
        .into_iter()
        .next()
        .expect("one parameter")
        .into_data();
    Ok(Hypergradient {
        grad,
        inner_loss: inner_loss_value(arch, &params, train, weights, eps)?,
        outer_loss: out.loss,
        val_accuracy: accuracy,
        params,
    })
}

/// Inner loss and its gradient with respect to the parameters, by value.
pub fn inner_loss_and_grad(
    arch: &MlpArchitecture,
    params: &MlpParams,
    train: &LabeledDataset,
    weights: &SampleWeights,
    eps: f64,
) -> Result<(f64, MlpParams)> {
    let mut tape = Tape::new();
    let theta = params.to_leaves(&mut tape);
    let w = tape.constant(weights.to_tensor());
    let batch = TapeBatch::new(&mut tape, train);
    let loss = inner_loss(&mut tape, arch, &theta, &batch, w, eps)?;
    let ids = theta.ids();
    let mut grads = tape.backward(loss, &ids)?;
    let grads = ids
        .iter()
        .map(|&id| grads.remove(id).expect("requested gradient"))
        .collect();
    Ok((tape.value(loss).item()?, MlpParams::from_tensors(grads)?))
}

pub fn inner_loss_value(
    arch: &MlpArchitecture,
    params: &MlpParams,
    train: &LabeledDataset,
    weights: &SampleWeights,
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let theta = params.to_constants(&mut tape);
    let w = tape.constant(weights.to_tensor());
    let batch = TapeBatch::new(&mut tape, train);
    let loss = inner_loss(&mut tape, arch, &theta, &batch, w, eps)?;
    tape.value(loss).item()
}

/// Outer loss and validation accuracy of fixed parameters.
pub fn outer_loss_value(
    arch: &MlpArchitecture,
    params: &MlpParams,
    val: &LabeledDataset,
    eps: f64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let theta = params.to_constants(&mut tape);
    let batch = TapeBatch::new(&mut tape, val);
    let outer = outer_loss(&mut tape, arch, &theta, &batch, &val.labels, eps)?;
    Ok((tape.value(outer.loss).item()?, outer.accuracy()))
}

/// `steps` plain gradient-descent steps on the weighted inner loss with
/// fixed weights.
pub fn weighted_gd(
    arch: &MlpArchitecture,
    params: &MlpParams,
    train: &LabeledDataset,
    weights: &SampleWeights,
    steps: usize,
    step_size: f64,
    eps: f64,
) -> Result<MlpParams> {
    let cfg = GdConfig::new(step_size)?;
    let mut theta = params.clone();
    for t in 0..steps {
        let (_, grads) = inner_loss_and_grad(arch, &theta, train, weights, eps)
            .map_err(|e| divergence(e, Some(t)))?;
        theta = gd_step(&theta, &grads, cfg)?;
    }
    Ok(theta)
}

/// Full-batch Adam on the unweighted mean cross-entropy.
pub fn train_standard(
    arch: &MlpArchitecture,
    params: &MlpParams,
    train: &LabeledDataset,
    adam: AdamConfig,
    steps: usize,
    eps: f64,
) -> Result<MlpParams> {
    params.check(arch)?;
    let ones = SampleWeights::ones(train.len());
    let mut theta = params.clone();
    let mut state = AdamState::new(&theta, adam);
    for t in 0..steps {
        let (_, grads) = inner_loss_and_grad(arch, &theta, train, &ones, eps)
            .map_err(|e| divergence(e, Some(t)))?;
        (theta, state) = adam_step(&theta, &grads, &state)?;
    }
    Ok(theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub outer_iter: usize,
    /// Inner loss at the unrolled parameters.
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub outer_iter: usize,
    /// Weights used during this iteration, before its update.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// One record per outer iteration.
    pub records: Vec<TraceRecord>,
    /// Taken at iterations `0, stride, 2 * stride, ...`.
    pub snapshots: Vec<WeightSnapshot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bo4scOutcome {
    pub params: MlpParams,
    pub weights: SampleWeights,
    pub trace: TrainingTrace,
}

/// Alternates `T`-step unrolls of the inner problem with projected gradient
/// steps on the sample weights, starting from `w = 1` and parameters drawn
/// by [`init_params`] with `seed`.
pub fn train_bo4sc(
    train: &LabeledDataset,
    val: &LabeledDataset,
    arch: &MlpArchitecture,
    cfg: &BilevelConfig,
    seed: u64,
) -> Result<Bo4scOutcome> {
    train_bo4sc_from(train, val, arch, cfg, &init_params(arch, seed))
}

/// [`train_bo4sc`] from explicit initial parameters. With
/// `warm_start = false` every outer iteration restarts from `theta0`.
pub fn train_bo4sc_from(
    train: &LabeledDataset,
    val: &LabeledDataset,
    arch: &MlpArchitecture,
    cfg: &BilevelConfig,
    theta0: &MlpParams,
) -> Result<Bo4scOutcome> {
    train_bo4sc_observed(train, val, arch, cfg, theta0, |_, _, _| {})
}

/// [`train_bo4sc_from`] calling `observer(j, theta, w)` after outer
/// iteration `j` with the unrolled parameters and the updated weights.
pub fn train_bo4sc_observed<F>(
    train: &LabeledDataset,
    val: &LabeledDataset,
    arch: &MlpArchitecture,
    cfg: &BilevelConfig,
    theta0: &MlpParams,
    mut observer: F,
) -> Result<Bo4scOutcome>
where
    F: FnMut(usize, &MlpParams, &SampleWeights),
{
    cfg.validate()?;
    let mut weights = SampleWeights::ones(train.len());
    check_inputs(arch, &weights, theta0, train, val)?;
    let mut theta = theta0.clone();
    let mut trace = TrainingTrace::default();
    for j in 0..cfg.outer_iterations {
        if j % cfg.snapshot_stride == 0 {
            trace.snapshots.push(WeightSnapshot {
                outer_iter: j,
                weights: weights.as_slice().to_vec(),
            });
        }
        let start = if cfg.warm_start { &theta } else { theta0 };
        let hg = hypergradient(arch, &weights, start, cfg, train, val)
            .map_err(|e| e.in_outer_iteration(j))?;
        trace.records.push(TraceRecord {
            outer_iter: j,
            inner_loss: hg.inner_loss,
            outer_loss: hg.outer_loss,
            val_accuracy: hg.val_accuracy,
        });
        let stepped = weights
            .as_slice()
            .iter()
            .zip(&hg.grad)
            .map(|(w, g)| w - cfg.outer_lr * g)
            .collect();
        weights = SampleWeights::new(stepped).map_err(|e| e.in_outer_iteration(j))?;
        weights.project();
        theta = hg.params;
        observer(j, &theta, &weights);
    }
    Ok(Bo4scOutcome {
        params: theta,
        weights,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, split, SplitSpec};
    use crate::model::{boltzmann_mcp, predict, Activation, DenseLayer};

    fn toy(n_train: usize, n_val: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let d = gen_blobs(n_train + n_val + 3, 3, 1.5, seed).unwrap();
        let s = split(&d, SplitSpec::new(n_train, n_val, 3), seed).unwrap();
        (s.train, s.val)
    }

    fn small_arch() -> MlpArchitecture {
        MlpArchitecture::new(2, vec![3], 3).with_activation(Activation::Tanh)
    }

    fn cfg(steps: usize) -> BilevelConfig {
        BilevelConfig {
            inner_steps: steps,
            inner_lr: 0.5,
            outer_lr: 1.0,
            outer_iterations: 3,
            ..BilevelConfig::default()
        }
    }

    fn mean_ce(arch: &MlpArchitecture, params: &MlpParams, data: &LabeledDataset, eps: f64) -> f64 {
        let out = predict(arch, params, &data.features).unwrap();
        out.iter()
            .zip(&data.labels)
            .map(|(o, &y)| -libm::log(o.probs[y].clamp(eps, 1.0)))
            .sum::<f64>()
            / data.len() as f64
    }

    #[test]
    fn inner_loss_reductions() {
        let (train, _) = toy(6, 4, 0);
        let arch = small_arch();
        let p = init_params(&arch, 1);
        let ones = inner_loss_value(&arch, &p, &train, &SampleWeights::ones(6), 1e-7).unwrap();
        assert!((ones - mean_ce(&arch, &p, &train, 1e-7)).abs() < 1e-14);
        let zeros = SampleWeights::new(vec![0.0; 6]).unwrap();
        assert_eq!(
            inner_loss_value(&arch, &p, &train, &zeros, 1e-7).unwrap(),
            0.0
        );
        assert!(inner_loss_value(&arch, &p, &train, &SampleWeights::ones(5), 1e-7).is_err());
    }

    #[test]
    fn inner_loss_of_a_confident_correct_sample() {
        // logits (0, L) with e^-L / (1 + e^-L) = eps put 1 - eps on class 1
        let eps = 1e-7;
        let l = libm::log((1.0 - eps) / eps);
        let arch = MlpArchitecture::new(1, vec![], 2);
        let p = MlpParams {
            layers: vec![DenseLayer {
                weight: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
                bias: Tensor::vector(vec![0.0, l]).unwrap(),
            }],
        };
        let d = LabeledDataset::new(
            Tensor::matrix(1, 1, vec![0.3]).unwrap(),
            vec![1],
            2,
            crate::data::Provenance::external("test"),
        )
        .unwrap();
        let loss = inner_loss_value(&arch, &p, &d, &SampleWeights::ones(1), eps).unwrap();
        assert!((loss - eps).abs() < 1e-12);
    }

    #[test]
    fn outer_loss_fixtures() {
        // zero network: p = 0.5 everywhere, loss = ln 2 whatever the labels
        let arch = MlpArchitecture::new(2, vec![4], 2);
        let (_, val) = toy(4, 6, 2);
        let val = LabeledDataset {
            labels: val.labels.iter().map(|y| y % 2).collect(),
            num_classes: 2,
            ..val
        };
        let (loss, _) = outer_loss_value(&arch, &MlpParams::zeros(&arch), &val, 1e-7).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);

        // correct predictions: loss = mean of -ln(confidence)
        let arch = small_arch();
        let p = init_params(&arch, 5);
        let out = predict(&arch, &p, &val.features).unwrap();
        let relabelled = LabeledDataset {
            labels: out.iter().map(|o| o.predicted_class).collect(),
            num_classes: 3,
            ..val.clone()
        };
        let expected = out
            .iter()
            .map(|o| -libm::log(boltzmann_mcp(&o.probs, arch.boltzmann_beta).unwrap()))
            .sum::<f64>()
            / out.len() as f64;
        let (loss, acc) = outer_loss_value(&arch, &p, &relabelled, 1e-7).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn single_step_matches_hand_gradient() {
        // one input, no hidden layer, two classes: dL/dz = (p - onehot) / n
        let arch = MlpArchitecture::new(1, vec![], 2);
        let theta = MlpParams {
            layers: vec![DenseLayer {
                weight: Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap(),
                bias: Tensor::vector(vec![0.1, 0.0]).unwrap(),
            }],
        };
        let d = LabeledDataset::new(
            Tensor::matrix(2, 1, vec![1.5, -0.5]).unwrap(),
            vec![0, 1],
            2,
            crate::data::Provenance::external("test"),
        )
        .unwrap();
        let w = [0.7, 0.4];
        let eta = 0.25;
        let mut gw = [0.0; 2];
        let mut gb = [0.0; 2];
        for (i, &wi) in w.iter().enumerate() {
            let x = d.features.data()[i];
            let z = [0.3 * x + 0.1, -0.2 * x];
            let m = z[0].max(z[1]);
            let e = [libm::exp(z[0] - m), libm::exp(z[1] - m)];
            for c in 0..2 {
                let p = e[c] / (e[0] + e[1]);
                let dz = wi * (p - f64::from(u8::from(d.labels[i] == c))) / 2.0;
                gw[c] += dz * x;
                gb[c] += dz;
            }
        }
        let weights = SampleWeights::new(w.to_vec()).unwrap();
        let mut tape = Tape::new();
        let nodes = theta.to_constants(&mut tape);
        let wn = tape.leaf(weights.to_tensor());
        let batch = TapeBatch::new(&mut tape, &d);
        let out = unroll_inner(&mut tape, &arch, &nodes, wn, &batch, 1, eta, 1e-7).unwrap();
        let got = out.values(&tape);
        let wt = got.layers[0].weight.data();
        let bt = got.layers[0].bias.data();
        for c in 0..2 {
            assert!((wt[c] - (theta.layers[0].weight.data()[c] - eta * gw[c])).abs() < 1e-14);
            assert!((bt[c] - (theta.layers[0].bias.data()[c] - eta * gb[c])).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weights_freeze_the_unroll() {
        let (train, _) = toy(6, 4, 3);
        let arch = small_arch();
        let p = init_params(&arch, 3);
        let zeros = SampleWeights::new(vec![0.0; 6]).unwrap();
        assert_eq!(
            weighted_gd(&arch, &p, &train, &zeros, 4, 0.5, 1e-7).unwrap(),
            p
        );
    }

    #[test]
    fn zero_steps_give_zero_hypergradient() {
        let (train, val) = toy(6, 4, 4);
        let arch = small_arch();
        let p = init_params(&arch, 4);
        let hg = hypergradient(&arch, &SampleWeights::ones(6), &p, &cfg(0), &train, &val).unwrap();
        assert_eq!(hg.grad, vec![0.0; 6]);
        assert_eq!(hg.params, p);
    }

    #[allow(clippy::too_many_arguments)]
    fn fd_hypergradient(
        arch: &MlpArchitecture,
        weights: &SampleWeights,
        theta0: &MlpParams,
        cfg: &BilevelConfig,
        train: &LabeledDataset,
        val: &LabeledDataset,
        targets: &[bool],
        h: f64,
    ) -> Vec<f64> {
        let f = |w: &[f64]| {
            let w = SampleWeights::new(w.to_vec()).unwrap();
            let theta = weighted_gd(
                arch,
                theta0,
                train,
                &w,
                cfg.inner_steps,
                cfg.inner_lr,
                cfg.clamp_eps,
            )
            .unwrap();
            let mut tape = Tape::new();
            let nodes = theta.to_constants(&mut tape);
            let batch = TapeBatch::new(&mut tape, val);
            let out = outer_loss_with_targets(
                &mut tape,
                arch,
                &nodes,
                &batch,
                &val.labels,
                Some(targets),
                cfg.clamp_eps,
            )
            .unwrap();
            tape.value(out.loss).item().unwrap()
        };
        (0..weights.len())
            .map(|i| {
                let mut up = weights.as_slice().to_vec();
                let mut down = up.clone();
                up[i] += h;
                down[i] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn hypergradient_matches_finite_differences() {
        let (train, val) = toy(6, 4, 5);
        let arch = MlpArchitecture::new(2, vec![], 3);
        let p = init_params(&arch, 5);
        let c = cfg(3);
        let w = SampleWeights::new(vec![1.0, 0.8, 0.6, 0.9, 0.5, 1.0]).unwrap();
        let hg = hypergradient(&arch, &w, &p, &c, &train, &val).unwrap();
        let (_, acc) = outer_loss_value(&arch, &hg.params, &val, c.clamp_eps).unwrap();
        assert_eq!(acc, hg.val_accuracy);
        let targets: Vec<bool> = predict(&arch, &hg.params, &val.features)
            .unwrap()
            .iter()
            .zip(&val.labels)
            .map(|(o, &y)| o.predicted_class == y)
            .collect();
        let fd = fd_hypergradient(&arch, &w, &p, &c, &train, &val, &targets, 1e-4);
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = hg
            .grad
            .iter()
            .zip(&fd)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(scale > 1e-6, "degenerate instance");
        assert!(err / scale < 1e-4, "relative error {}", err / scale);
    }

    #[test]
    fn duplicated_sample_splits_its_gradient() {
        let (train, val) = toy(5, 4, 6);
        let arch = small_arch();
        let p = init_params(&arch, 6);
        let c = cfg(3);
        let n = train.len() as f64;
        let w = SampleWeights::new(vec![0.9, 0.7, 1.0, 0.6, 0.8]).unwrap();
        let base = hypergradient(&arch, &w, &p, &c, &train, &val).unwrap();

        // duplicate sample 2 and rescale so that the inner loss is unchanged
        let k = 2;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.push(k);
        let dup = train.subset(&order);
        let r = (n + 1.0) / n;
        let mut dw: Vec<f64> = w.as_slice().iter().map(|v| v * r).collect();
        dw[k] *= 0.5;
        dw.push(dw[k]);
        let dup_w = SampleWeights::new(dw).unwrap();
        let split = hypergradient(&arch, &dup_w, &p, &c, &dup, &val).unwrap();

        for (a, b) in base.params.tensors().iter().zip(split.params.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let scale = base.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..train.len() {
            let expected = if i == k { 2.0 } else { 1.0 } * base.grad[i] / r;
            let got = if i == k {
                split.grad[k] + split.grad[train.len()]
            } else {
                split.grad[i]
            };
            assert!(
                (got - expected).abs() < 1e-9 * scale.max(1e-12),
                "sample {i}"
            );
        }
        assert_eq!(split.grad[k], split.grad[train.len()]);
    }

    #[test]
    fn checkpointing_matches_full_unroll() {
        for (steps, every, n) in [(5, 1, 6), (20, 4, 10), (20, 7, 10), (1, 1, 6)] {
            let (train, val) = toy(n, 4, 7);
            let arch = small_arch();
            let p = init_params(&arch, 7);
            let w = SampleWeights::new((0..n).map(|i| 0.5 + 0.05 * i as f64).collect()).unwrap();
            let full = hypergradient(&arch, &w, &p, &cfg(steps), &train, &val).unwrap();
            let ck = BilevelConfig {
                checkpoint_every: Some(every),
                ..cfg(steps)
            };
            let seg = hypergradient(&arch, &w, &p, &ck, &train, &val).unwrap();
            for (a, b) in full.grad.iter().zip(&seg.grad) {
                assert!((a - b).abs() < 1e-12, "T = {steps}: {a} vs {b}");
            }
            assert_eq!(full.params, seg.params);
            assert!((full.outer_loss - seg.outer_loss).abs() < 1e-15);
            assert_eq!(full.val_accuracy, seg.val_accuracy);
        }
        let (train, val) = toy(6, 4, 7);
        let arch = small_arch();
        let p = init_params(&arch, 7);
        let bad = CheckpointPlan::new(4, vec![1, 2]).unwrap();
        let w = SampleWeights::ones(6);
        assert!(hypergradient_checkpointed(&arch, &w, &p, &cfg(5), &train, &val, &bad).is_err());
    }

    #[test]
    fn no_outer_iterations_returns_initial_state() {
        let (train, val) = toy(6, 4, 8);
        let arch = small_arch();
        let c = BilevelConfig {
            outer_iterations: 0,
            ..cfg(2)
        };
        let out = train_bo4sc(&train, &val, &arch, &c, 8).unwrap();
        assert_eq!(out.params, init_params(&arch, 8));
        assert_eq!(out.weights, SampleWeights::ones(6));
        assert!(out.trace.records.is_empty() && out.trace.snapshots.is_empty());
    }

    #[test]
    fn weights_stay_projected_and_runs_repeat() {
        let (train, val) = toy(10, 6, 9);
        let arch = small_arch();
        let c = BilevelConfig {
            outer_lr: 200.0,
            outer_iterations: 7,
            snapshot_stride: 3,
            ..cfg(3)
        };
        let a = train_bo4sc(&train, &val, &arch, &c, 9).unwrap();
        assert!(a.weights.as_slice().iter().all(|w| (0.0..=1.0).contains(w)));
        assert!(a.weights.as_slice().iter().any(|&w| w < 1.0));
        for s in &a.trace.snapshots {
            assert!(s.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        }
        assert_eq!(a.trace.records.len(), 7);
        assert_eq!(a.trace.snapshots.len(), 3);
        assert_eq!(a.trace.snapshots[0].weights, vec![1.0; 10]);
        assert_eq!(a, train_bo4sc(&train, &val, &arch, &c, 9).unwrap());
    }

    #[test]
    fn frozen_weights_reduce_to_plain_gd() {
        let (train, val) = toy(10, 6, 10);
        let arch = MlpArchitecture::new(2, vec![5], 3);
        let c = BilevelConfig {
            outer_lr: 0.0,
            outer_iterations: 4,
            ..cfg(3)
        };
        let theta0 = init_params(&arch, 10);
        let ones = SampleWeights::ones(10);
        let mut trajectory = Vec::new();
        let out = train_bo4sc_observed(&train, &val, &arch, &c, &theta0, |_, theta, w| {
            assert_eq!(w, &ones);
            trajectory.push(theta.clone());
        })
        .unwrap();
        let mut plain = theta0;
        for theta in &trajectory {
            plain = weighted_gd(&arch, &plain, &train, &ones, 3, c.inner_lr, c.clamp_eps).unwrap();
            assert_eq!(theta, &plain);
        }
        assert_eq!(out.params, plain);
        assert_eq!(out.weights, ones);
    }

    #[test]
    fn outer_loss_decreases_on_convex_toy() {
        // softmax regression, fixed restart point, small outer step
        let (train, val) = toy(10, 8, 11);
        let arch = MlpArchitecture::new(2, vec![], 3);
        let c = BilevelConfig {
            inner_steps: 5,
            inner_lr: 0.2,
            outer_lr: 0.5,
            outer_iterations: 15,
            warm_start: false,
            ..BilevelConfig::default()
        };
        let out = train_bo4sc(&train, &val, &arch, &c, 11).unwrap();
        let losses: Vec<f64> = out.trace.records.iter().map(|r| r.outer_loss).collect();
        for pair in losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15, "{losses:?}");
        }
        assert!(losses[losses.len() - 1] < losses[0]);
    }

    #[test]
    fn config_validation() {
        assert!(BilevelConfig::default().validate().is_ok());
        assert!(cfg(0).validate().is_err());
        assert!(BilevelConfig {
            inner_lr: 0.0,
            ..cfg(1)
        }
        .validate()
        .is_err());
        assert!(BilevelConfig {
            outer_lr: -1.0,
            ..cfg(1)
        }
        .validate()
        .is_err());
        assert!(BilevelConfig {
            clamp_eps: 0.5,
            ..cfg(1)
        }
        .validate()
        .is_err());
        assert!(BilevelConfig {
            snapshot_stride: 0,
            ..cfg(1)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn divergence_names_the_step() {
        let (train, val) = toy(6, 4, 12);
        let arch = MlpArchitecture::new(2, vec![8, 8], 3);
        let c = BilevelConfig {
            inner_lr: 1e200,
            ..cfg(4)
        };
        let err = train_bo4sc(&train, &val, &arch, &c, 12).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Divergence {
                    outer_iteration: 0,
                    inner_step: Some(_),
                    ..
                }
            ),
            "{err:?}"
        );
    }
}
