use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{eval, NodeId, Op, Tape};
use crate::{Result, Tensor};

/// Where gradient values live during a reverse sweep.
pub(crate) trait AdjointBuilder {
    type Grad: Clone;

    fn tape(&self) -> &Tape;
    /// The forward value of `id` as an operand of a gradient expression.
    fn forward(&mut self, id: NodeId) -> Self::Grad;
    fn constant(&mut self, value: Tensor) -> Self::Grad;
    fn apply(&mut self, op: Op, args: &[&Self::Grad]) -> Result<Self::Grad>;
}

pub(crate) struct ValueBuilder<'a> {
    pub tape: &'a Tape,
}

impl AdjointBuilder for ValueBuilder<'_> {
    type Grad = Arc<Tensor>;

    fn tape(&self) -> &Tape {
        self.tape
    }

    fn forward(&mut self, id: NodeId) -> Arc<Tensor> {
        self.tape.nodes[id.0].value.clone()
    }

    fn constant(&mut self, value: Tensor) -> Arc<Tensor> {
        Arc::new(value)
    }

    fn apply(&mut self, op: Op, args: &[&Arc<Tensor>]) -> Result<Arc<Tensor>> {
        let args: Vec<&Tensor> = args.iter().map(|a| &***a).collect();
        eval(&op, &args).map(Arc::new)
    }
}

pub(crate) struct TapeBuilder<'a> {
    pub tape: &'a mut Tape,
}

impl AdjointBuilder for TapeBuilder<'_> {
    type Grad = NodeId;

    fn tape(&self) -> &Tape {
        self.tape
    }

    fn forward(&mut self, id: NodeId) -> NodeId {
        id
    }

    fn constant(&mut self, value: Tensor) -> NodeId {
        self.tape.constant(value)
    }

    fn apply(&mut self, op: Op, args: &[&NodeId]) -> Result<NodeId> {
        let ids: Vec<NodeId> = args.iter().map(|a| **a).collect();
        self.tape.apply(op, &ids)
    }
}

fn mask(t: &Tensor, keep: impl Fn(f64) -> bool) -> Tensor {
    Tensor::from_parts(
        t.shape().to_vec(),
        t.data()
            .iter()
            .map(|&x| if keep(x) { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Propagates `seeds` backwards and returns the accumulated cotangent of
/// each `wrt` node (`None` when no path reaches it).
pub(crate) fn sweep<B: AdjointBuilder>(
    b: &mut B,
    seeds: Vec<(NodeId, B::Grad)>,
    wrt: &[NodeId],
) -> Result<Vec<Option<B::Grad>>> {
    let Some(hi) = seeds.iter().map(|(id, _)| id.0).max() else {
        return Ok(vec![None; wrt.len()]);
    };
    let Some(lo) = wrt.iter().map(|id| id.0).min() else {
        return Ok(Vec::new());
    };
    if lo > hi {
        return Ok(vec![None; wrt.len()]);
    }
    let span = hi - lo + 1;

    let mut is_target = vec![false; span];
    for id in wrt {
        if id.0 <= hi {
            is_target[id.0 - lo] = true;
        }
    }
    // relevant: the node depends on at least one target
    let mut relevant = is_target.clone();
    for i in lo..=hi {
        let node = &b.tape().nodes[i];
        if !relevant[i - lo] && node.op.is_differentiable() {
            relevant[i - lo] = node.parents.iter().any(|p| p.0 >= lo && relevant[p.0 - lo]);
        }
    }

    let mut adjoint: Vec<Option<B::Grad>> = vec![None; span];
    for (id, g) in seeds {
        if id.0 >= lo && relevant[id.0 - lo] {
            accumulate(b, &mut adjoint[id.0 - lo], g)?;
        }
    }

    let mut found: Vec<Option<B::Grad>> = vec![None; span];
    for i in (lo..=hi).rev() {
        let Some(g) = adjoint[i - lo].take() else {
            continue;
        };
        if is_target[i - lo] {
            found[i - lo] = Some(g);
            continue;
        }
        let node = &b.tape().nodes[i];
        let op = node.op.clone();
        let parents = node.parents.clone();
        let need: Vec<bool> = parents
            .iter()
            .map(|p| p.0 >= lo && relevant[p.0 - lo])
            .collect();
        if !need.iter().any(|&n| n) {
            continue;
        }
        let contributions = vjp(b, &op, NodeId(i), &parents, &need, &g)?;
        for (p, c) in parents.iter().zip(contributions) {
            if let Some(c) = c {
                accumulate(b, &mut adjoint[p.0 - lo], c)?;
            }
        }
    }
    Ok(wrt
        .iter()
        .map(|id| {
            if id.0 <= hi {
                found[id.0 - lo].clone()
            } else {
                None
            }
        })
        .collect())
}

fn accumulate<B: AdjointBuilder>(b: &mut B, slot: &mut Option<B::Grad>, g: B::Grad) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => b.apply(Op::Add, &[&prev, &g])?,
    });
    Ok(())
}

/// Cotangent contributions of node `out` to each parent flagged in `need`.
fn vjp<B: AdjointBuilder>(
    b: &mut B,
    op: &Op,
    out: NodeId,
    parents: &[NodeId],
    need: &[bool],
    g: &B::Grad,
) -> Result<Vec<Option<B::Grad>>> {
    let neg = |b: &mut B, x: &B::Grad| {
        b.apply(
            Op::Affine {
                scale: -1.0,
                shift: 0.0,
            },
            &[x],
        )
    };
    let mut res: Vec<Option<B::Grad>> = vec![None; parents.len()];
    match op {
        Op::Leaf | Op::Constant | Op::ArgMax => {}
        Op::Add => {
            for k in 0..2 {
                if need[k] {
                    res[k] = Some(g.clone());
                }
            }
        }
        Op::Sub => {
            if need[0] {
                res[0] = Some(g.clone());
            }
            if need[1] {
                res[1] = Some(neg(b, g)?);
            }
        }
        Op::Mul => {
            if need[0] {
                let y = b.forward(parents[1]);
                res[0] = Some(b.apply(Op::Mul, &[g, &y])?);
            }
            if need[1] {
                let x = b.forward(parents[0]);
                res[1] = Some(b.apply(Op::Mul, &[g, &x])?);
            }
        }
        Op::Div => {
            let y = b.forward(parents[1]);
            if need[0] {
                res[0] = Some(b.apply(Op::Div, &[g, &y])?);
            }
            if need[1] {
                // d(x/y)/dy = -(x/y)/y
                let q = b.forward(out);
                let gq = b.apply(Op::Mul, &[g, &q])?;
                let t = b.apply(Op::Div, &[&gq, &y])?;
                res[1] = Some(neg(b, &t)?);
            }
        }
        Op::Affine { scale, .. } => {
            res[0] = Some(b.apply(
                Op::Affine {
                    scale: *scale,
                    shift: 0.0,
                },
                &[g],
            )?);
        }
        Op::MatMul => {
            if need[0] {
                let y = b.forward(parents[1]);
                let yt = b.apply(Op::Transpose, &[&y])?;
                res[0] = Some(b.apply(Op::MatMul, &[g, &yt])?);
            }
            if need[1] {
                let x = b.forward(parents[0]);
                let xt = b.apply(Op::Transpose, &[&x])?;
                res[1] = Some(b.apply(Op::MatMul, &[&xt, g])?);
            }
        }
        Op::Transpose => {
            res[0] = Some(b.apply(Op::Transpose, &[g])?);
        }
        Op::AddBias => {
            if need[0] {
                res[0] = Some(g.clone());
            }
            if need[1] {
                res[1] = Some(b.apply(Op::SumCols, &[g])?);
            }
        }
        Op::Exp => {
            let y = b.forward(out);
            res[0] = Some(b.apply(Op::Mul, &[g, &y])?);
        }
        Op::Log => {
            let x = b.forward(parents[0]);
            res[0] = Some(b.apply(Op::Div, &[g, &x])?);
        }
        Op::Tanh => {
            let y = b.forward(out);
            let y2 = b.apply(Op::Mul, &[&y, &y])?;
            let d = b.apply(
                Op::Affine {
                    scale: -1.0,
                    shift: 1.0,
                },
                &[&y2],
            )?;
            res[0] = Some(b.apply(Op::Mul, &[g, &d])?);
        }
        Op::Relu => {
            let m = mask(b.tape().value(parents[0]), |x| x > 0.0);
            let m = b.constant(m);
            res[0] = Some(b.apply(Op::Mul, &[g, &m])?);
        }
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            let m = mask(b.tape().value(parents[0]), |x| lo <= x && x <= hi);
            let m = b.constant(m);
            res[0] = Some(b.apply(Op::Mul, &[g, &m])?);
        }
        Op::Sum => {
            let shape = b.tape().value(parents[0]).shape().to_vec();
            res[0] = Some(b.apply(Op::Fill { shape }, &[g])?);
        }
        Op::Mean => {
            let x = b.tape().value(parents[0]);
            let shape = x.shape().to_vec();
            let inv = 1.0 / x.len() as f64;
            let filled = b.apply(Op::Fill { shape }, &[g])?;
            res[0] = Some(b.apply(
                Op::Affine {
                    scale: inv,
                    shift: 0.0,
                },
                &[&filled],
            )?);
        }
        Op::SumRows => {
            let cols = b.tape().value(parents[0]).cols();
            res[0] = Some(b.apply(Op::BroadcastRows { cols }, &[g])?);
        }
        Op::SumCols => {
            let rows = b.tape().value(parents[0]).rows();
            res[0] = Some(b.apply(Op::BroadcastCols { rows }, &[g])?);
        }
        Op::BroadcastRows { .. } => {
            res[0] = Some(b.apply(Op::SumRows, &[g])?);
        }
        Op::BroadcastCols { .. } => {
            res[0] = Some(b.apply(Op::SumCols, &[g])?);
        }
        Op::Fill { .. } => {
            res[0] = Some(b.apply(Op::Sum, &[g])?);
        }
        Op::Softmax => {
            // s * (g - <g, s>) per row
            let s = b.forward(out);
            let gs = b.apply(Op::Mul, &[g, &s])?;
            let value = b.tape().value(out);
            let spread = if value.rank() == 2 {
                let cols = value.cols();
                let r = b.apply(Op::SumRows, &[&gs])?;
                b.apply(Op::BroadcastRows { cols }, &[&r])?
            } else {
                let shape = value.shape().to_vec();
                let r = b.apply(Op::Sum, &[&gs])?;
                b.apply(Op::Fill { shape }, &[&r])?
            };
            let centred = b.apply(Op::Sub, &[g, &spread])?;
            res[0] = Some(b.apply(Op::Mul, &[&s, &centred])?);
        }
    }
    Ok(res)
}
