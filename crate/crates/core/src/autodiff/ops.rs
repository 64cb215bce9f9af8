//! Operation set and forward kernels.
//!
//! Every node on a tape, and every gradient the reverse sweep builds, is
//! evaluated by [`eval`]. Value-mode and tape-mode backward passes therefore
//! execute the same floating-point instructions in the same order.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Differentiation root registered with the tape.
    Leaf,
    /// Value without gradient.
    Constant,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Elementwise quotient.
    Div,
    /// `scale * x + shift`, elementwise.
    Affine {
        scale: f64,
        shift: f64,
    },
    /// `[r, k] x [k, c] -> [r, c]`.
    MatMul,
    Transpose,
    /// `[r, c] + [c]`, the bias broadcast over rows.
    AddBias,
    Exp,
    Log,
    Tanh,
    Relu,
    /// Gradient is identity on `[lo, hi]` and zero outside.
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Sum of all entries, producing a scalar.
    Sum,
    Mean,
    /// `[r, c] -> [r]`.
    SumRows,
    /// `[r, c] -> [c]`.
    SumCols,
    /// `[r] -> [r, cols]`, repeating each entry along its row.
    BroadcastRows {
        cols: usize,
    },
    /// `[c] -> [rows, c]`, repeating the vector in every row.
    BroadcastCols {
        rows: usize,
    },
    /// Scalar to `shape`.
    Fill {
        shape: Vec<usize>,
    },
    /// Softmax along the trailing axis (per row for matrices).
    Softmax,
    /// Per-row index of the largest entry, lowest index on ties. Forward only.
    ArgMax,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Affine { .. } => "affine",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::AddBias => "add_bias",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::Fill { .. } => "fill",
            Op::Softmax => "softmax",
            Op::ArgMax => "max_index",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Leaf | Op::Constant => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::AddBias => 2,
            _ => 1,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, Op::Constant | Op::ArgMax)
    }
}

impl FromStr for Op {
    type Err = Error;

    /// Parses the tags of parameter-free operations.
    fn from_str(tag: &str) -> Result<Self> {
        Ok(match tag {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "matmul" => Op::MatMul,
            "transpose" => Op::Transpose,
            "add_bias" => Op::AddBias,
            "exp" => Op::Exp,
            "log" => Op::Log,
            "tanh" => Op::Tanh,
            "relu" => Op::Relu,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "sum_rows" => Op::SumRows,
            "sum_cols" => Op::SumCols,
            "softmax" => Op::Softmax,
            "max_index" | "argmax" => Op::ArgMax,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

fn mismatch(op: &Op, left: &Tensor, right: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn require_rank(op: &Op, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() == rank {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: op.name(),
            left: t.shape().to_vec(),
            right: vec![0; rank],
        })
    }
}

fn zip_with(op: &Op, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

/// Evaluates `op` on its inputs. Fails on shape errors and on any
/// non-finite output.
pub fn eval(op: &Op, args: &[&Tensor]) -> Result<Tensor> {
    if args.len() != op.arity() {
        return Err(Error::Arity {
            op: op.name(),
            expected: op.arity(),
            got: args.len(),
        });
    }
    let out = match op {
        Op::Leaf | Op::Constant => return Err(Error::UnsupportedOp(op.name().to_string())),
        Op::Add => zip_with(op, args[0], args[1], |x, y| x + y)?,
        Op::Sub => zip_with(op, args[0], args[1], |x, y| x - y)?,
        Op::Mul => zip_with(op, args[0], args[1], |x, y| x * y)?,
        Op::Div => zip_with(op, args[0], args[1], |x, y| x / y)?,
        Op::Affine { scale, shift } => map(args[0], |x| scale * x + shift),
        Op::MatMul => matmul(op, args[0], args[1])?,
        Op::Transpose => {
            let a = args[0];
            require_rank(op, a, 2)?;
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let src = a.data();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = src[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], data)
        }
        Op::AddBias => {
            let (a, b) = (args[0], args[1]);
            require_rank(op, a, 2)?;
            if b.rank() != 1 || b.len() != a.shape()[1] {
                return Err(mismatch(op, a, b));
            }
            let c = b.len();
            let bias = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| x + bias[k % c])
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::Exp => map(args[0], libm::exp),
        Op::Log => map(args[0], libm::log),
        Op::Tanh => map(args[0], libm::tanh),
        Op::Relu => map(args[0], |x| if x > 0.0 { x } else { 0.0 }),
        Op::Clamp { lo, hi } => {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(alloc::format!(
                    "clamp bounds [{lo}, {hi}]"
                )));
            }
            map(args[0], |x| x.clamp(*lo, *hi))
        }
        Op::Sum => Tensor::scalar(args[0].data().iter().sum()),
        Op::Mean => {
            let a = args[0];
            if a.is_empty() {
                return Err(Error::EmptyInput("mean"));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Op::SumRows => {
            let a = args[0];
            require_rank(op, a, 2)?;
            let data = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
            Tensor::from_parts(vec![a.rows()], data)
        }
        Op::SumCols => {
            let a = args[0];
            require_rank(op, a, 2)?;
            let c = a.cols();
            let mut data = vec![0.0; c];
            for r in 0..a.rows() {
                for (acc, &x) in data.iter_mut().zip(a.row(r)) {
                    *acc += x;
                }
            }
            Tensor::from_parts(vec![c], data)
        }
        Op::BroadcastRows { cols } => {
            let a = args[0];
            require_rank(op, a, 1)?;
            let mut data = Vec::with_capacity(a.len() * cols);
            for &x in a.data() {
                data.extend(core::iter::repeat_n(x, *cols));
            }
            Tensor::from_parts(vec![a.len(), *cols], data)
        }
        Op::BroadcastCols { rows } => {
            let a = args[0];
            require_rank(op, a, 1)?;
            let mut data = Vec::with_capacity(a.len() * rows);
            for _ in 0..*rows {
                data.extend_from_slice(a.data());
            }
            Tensor::from_parts(vec![*rows, a.len()], data)
        }
        Op::Fill { shape } => {
            let v = args[0].item()?;
            Tensor::full(shape, v)
        }
        Op::Softmax => softmax(op, args[0])?,
        Op::ArgMax => {
            let a = args[0];
            if a.rank() == 0 || a.is_empty() {
                return Err(Error::EmptyInput("max_index"));
            }
            let data = (0..a.rows()).map(|r| argmax(a.row(r)) as f64).collect();
            let shape = if a.rank() == 2 {
                vec![a.rows()]
            } else {
                Vec::new()
            };
            Tensor::from_parts(shape, data)
        }
    };
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: op.name() });
    }
    Ok(out)
}

fn matmul(op: &Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(mismatch(op, a, b));
    }
    let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in out_row.iter_mut().zip(&bd[p * c..(p + 1) * c]) {
                *o += aip * bpj;
            }
        }
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

fn softmax(op: &Op, a: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 || a.rank() > 2 || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: op.name(),
            left: a.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    let c = a.cols();
    let mut data = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let row = a.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut total = 0.0;
        for &x in row {
            let e = libm::exp(x - max);
            total += e;
            data.push(e);
        }
        for v in &mut data[start..start + c] {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
