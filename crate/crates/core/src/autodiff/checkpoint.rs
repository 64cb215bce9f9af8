//! Recompute-on-backward for long unrolled recurrences.
//!
//! The state after each marked step is stored as plain values. The backward
//! pass rebuilds one segment at a time on a fresh tape and pulls the state
//! cotangent through it, so peak memory is one segment rather than the whole
//! unroll.

use alloc::vec::Vec;

use super::{NodeId, Tape};
use crate::{Error, Result, Tensor};

/// Step indices after which the recurrent state is stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointPlan {
    steps: usize,
    markers: Vec<usize>,
}

impl CheckpointPlan {
    /// Markers must be strictly increasing and lie strictly between 0 and
    /// `steps`; step 0 and the final step are always boundaries.
    pub fn new(steps: usize, markers: Vec<usize>) -> Result<Self> {
        let ordered = markers.windows(2).all(|w| w[0] < w[1]);
        let in_range = markers.iter().all(|&m| m > 0 && m < steps);
        if !ordered || !in_range {
            return Err(Error::CheckpointOrder { markers, steps });
        }
        Ok(CheckpointPlan { steps, markers })
    }

    /// A single segment: plain backward over the whole unroll.
    pub fn none(steps: usize) -> Self {
        CheckpointPlan {
            steps,
            markers: Vec::new(),
        }
    }

    /// A boundary every `interval` steps.
    pub fn every(steps: usize, interval: usize) -> Self {
        let interval = interval.max(1);
        CheckpointPlan {
            steps,
            markers: (interval..steps).step_by(interval).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn markers(&self) -> &[usize] {
        &self.markers
    }

    /// Half-open `(start, end)` step ranges.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut bounds = Vec::with_capacity(self.markers.len() + 2);
        bounds.push(0);
        bounds.extend_from_slice(&self.markers);
        bounds.push(self.steps);
        bounds.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug)]
pub struct CheckpointedGrad {
    pub loss: f64,
    pub final_state: Vec<Tensor>,
    /// Cotangent of the loss with respect to each parameter tensor.
    pub params: Vec<Tensor>,
    /// Cotangent of the loss with respect to the initial state.
    pub initial_state: Vec<Tensor>,
}

/// Differentiates `loss(state_T, params)` where
/// `state_{t+1} = step(state_t, params, t)`, storing only the states at the
/// plan's boundaries.
///
/// `step` receives the tape, the current state nodes, the parameter nodes
/// and the global step index. It must be deterministic: each segment is
/// evaluated twice.
pub fn checkpointed_vjp<S, L>(
    plan: &CheckpointPlan,
    initial_state: &[Tensor],
    params: &[Tensor],
    mut step: S,
    mut loss: L,
) -> Result<CheckpointedGrad>
where
    S: FnMut(&mut Tape, &[NodeId], &[NodeId], usize) -> Result<Vec<NodeId>>,
    L: FnMut(&mut Tape, &[NodeId], &[NodeId]) -> Result<NodeId>,
{
    let segments = plan.segments();
    let run_segment = |step: &mut S, start_state: &[Tensor], (from, to): (usize, usize)| {
        let mut tape = Tape::new();
        let state: Vec<NodeId> = start_state.iter().map(|t| tape.leaf(t.clone())).collect();
        let param_nodes: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let mut current = state.clone();
        for t in from..to {
            current = step(&mut tape, &current, &param_nodes, t)?;
            if current.len() != state.len() {
                return Err(Error::SizeMismatch {
                    expected: state.len(),
                    got: current.len(),
                });
            }
        }
        Ok::<_, Error>((tape, state, param_nodes, current))
    };

    let mut checkpoints: Vec<Vec<Tensor>> = Vec::with_capacity(segments.len());
    let mut state = initial_state.to_vec();
    for &segment in &segments {
        let (tape, _, _, out) = run_segment(&mut step, &state, segment)?;
        checkpoints.push(state);
        state = out.iter().map(|&id| tape.value(id).clone()).collect();
    }

    let mut tape = Tape::new();
    let state_nodes: Vec<NodeId> = state.iter().map(|t| tape.leaf(t.clone())).collect();
    let param_nodes: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = loss(&mut tape, &state_nodes, &param_nodes)?;
    let loss_value = tape.value(root).item()?;
    let wrt: Vec<NodeId> = state_nodes.iter().chain(&param_nodes).copied().collect();
    let mut grads = tape.backward(root, &wrt)?;
    let mut state_adj: Vec<Tensor> = state_nodes
        .iter()
        .map(|&id| grads.remove(id).expect("requested gradient"))
        .collect();
    let mut param_adj: Vec<Tensor> = param_nodes
        .iter()
        .map(|&id| grads.remove(id).expect("requested gradient"))
        .collect();

    for (segment, start) in segments.iter().zip(&checkpoints).rev() {
        let (tape, state_leaves, param_leaves, out) = run_segment(&mut step, start, *segment)?;
        let seeds: Vec<(NodeId, Tensor)> = out.into_iter().zip(state_adj).collect();
        let wrt: Vec<NodeId> = state_leaves.iter().chain(&param_leaves).copied().collect();
        let mut grads = tape.backward_seeded(&seeds, &wrt)?;
        state_adj = state_leaves
            .iter()
            .map(|&id| grads.remove(id).expect("requested gradient"))
            .collect();
        for (acc, &id) in param_adj.iter_mut().zip(&param_leaves) {
            let g = grads.remove(id).expect("requested gradient");
            *acc = super::eval(&super::Op::Add, &[acc, &g])?;
        }
    }

    Ok(CheckpointedGrad {
        loss: loss_value,
        final_state: state,
        params: param_adj,
        initial_state: state_adj,
    })
}
