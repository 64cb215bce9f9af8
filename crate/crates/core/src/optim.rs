//! First-order optimizers over [`MlpParams`].
//!
//! Plain gradient descent comes in two forms: on values, and recorded on a
//! tape so that the update stays differentiable. Both evaluate the same
//! kernels (`eta * g`, then `theta - that`) and agree bit for bit.

use alloc::vec::Vec;

use crate::autodiff::{eval, NodeId, Op, Tape};
use crate::model::{DenseLayer, MlpParams, ParamNodes};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdConfig {
    pub step_size: f64,
}

impl GdConfig {
    pub fn new(step_size: f64) -> Result<Self> {
        if step_size > 0.0 && step_size.is_finite() {
            Ok(GdConfig { step_size })
        } else {
            Err(Error::InvalidArgument(alloc::format!(
                "step size must be positive, got {step_size}"
            )))
        }
    }
}

fn gd_kernel(theta: &Tensor, grad: &Tensor, step_size: f64) -> Result<Tensor> {
    let scaled = eval(
        &Op::Affine {
            scale: step_size,
            shift: 0.0,
        },
        &[grad],
    )?;
    eval(&Op::Sub, &[theta, &scaled])
}

/// `theta - eta * grad`.
pub fn gd_step(params: &MlpParams, grads: &MlpParams, cfg: GdConfig) -> Result<MlpParams> {
    params.same_shape(grads)?;
    let layers = params
        .layers
        .iter()
        .zip(&grads.layers)
        .map(|(p, g)| {
            Ok(DenseLayer {
                weight: gd_kernel(&p.weight, &g.weight, cfg.step_size)?,
                bias: gd_kernel(&p.bias, &g.bias, cfg.step_size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MlpParams { layers })
}

/// Records `theta - eta * grad` on the tape. `grads` lists one node per
/// parameter tensor in [`ParamNodes::ids`] order.
pub fn gd_step_on_tape(
    tape: &mut Tape,
    params: &ParamNodes,
    grads: &[NodeId],
    step_size: f64,
) -> Result<ParamNodes> {
    let ids = params.ids();
    if ids.len() != grads.len() {
        return Err(Error::SizeMismatch {
            expected: ids.len(),
            got: grads.len(),
        });
    }
    let mut next = Vec::with_capacity(ids.len());
    for (&theta, &g) in ids.iter().zip(grads) {
        let scaled = tape.scale(g, step_size)?;
        next.push(tape.sub(theta, scaled)?);
    }
    Ok(ParamNodes::from_ids(&next))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &MlpParams,
    grads: &MlpParams,
    state: &AdamState,
) -> Result<(MlpParams, AdamState)> {
    params.same_shape(grads)?;
    let theta = params.tensors();
    if state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::SizeMismatch {
            expected: theta.len(),
            got: state.m.len(),
        });
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.t + 1;
    let bc1 = 1.0 - libm::pow(beta1, t as f64);
    let bc2 = 1.0 - libm::pow(beta2, t as f64);

    let mut new_theta = Vec::with_capacity(theta.len());
    let mut new_m = Vec::with_capacity(theta.len());
    let mut new_v = Vec::with_capacity(theta.len());
    for (k, (p, g)) in theta.iter().zip(grads.tensors()).enumerate() {
        let (m, v) = (&state.m[k], &state.v[k]);
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_state",
                left: p.shape().to_vec(),
                right: m.shape().to_vec(),
            });
        }
        let mut pd = p.data().to_vec();
        let mut md = m.data().to_vec();
        let mut vd = v.data().to_vec();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= learning_rate * m_hat / (libm::sqrt(v_hat) + epsilon);
        }
        new_theta.push(Tensor::new(p.shape().to_vec(), pd)?);
        new_m.push(Tensor::new(p.shape().to_vec(), md)?);
        new_v.push(Tensor::new(p.shape().to_vec(), vd)?);
    }
    Ok((
        MlpParams::from_tensors(new_theta)?,
        AdamState {
            config: state.config,
            m: new_m,
            v: new_v,
            t,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(value: f64) -> MlpParams {
        MlpParams {
            layers: vec![DenseLayer {
                weight: Tensor::matrix(1, 1, vec![value]).unwrap(),
                bias: Tensor::vector(vec![0.0]).unwrap(),
            }],
        }
    }

    fn value(p: &MlpParams) -> f64 {
        p.layers[0].weight.data()[0]
    }

    #[test]
    fn gd_arithmetic() {
        let cfg = GdConfig::new(0.1).unwrap();
        let out = gd_step(&single(1.0), &single(2.0), cfg).unwrap();
        assert!((value(&out) - 0.8).abs() < 1e-15);
        assert_eq!(
            gd_step(&single(1.0), &single(0.0), cfg).unwrap(),
            single(1.0)
        );
    }

    #[test]
    fn gd_on_quadratic_matches_closed_form() {
        // g = theta^2, so theta_{k+1} = (1 - 2 eta) theta_k
        let cfg = GdConfig::new(0.4).unwrap();
        let mut p = single(1.0);
        let mut prev_loss = f64::INFINITY;
        for _ in 0..3 {
            let g = single(2.0 * value(&p));
            p = gd_step(&p, &g, cfg).unwrap();
            let loss = value(&p) * value(&p);
            assert!(loss < prev_loss);
            prev_loss = loss;
        }
        assert!((value(&p) - 0.008).abs() < 1e-15);
    }

    #[test]
    fn gd_rejects_bad_config_and_shapes() {
        assert!(GdConfig::new(0.0).is_err());
        assert!(GdConfig::new(-1.0).is_err());
        let two = MlpParams {
            layers: vec![DenseLayer {
                weight: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
                bias: Tensor::vector(vec![0.0, 0.0]).unwrap(),
            }],
        };
        assert!(gd_step(&single(1.0), &two, GdConfig::new(0.1).unwrap()).is_err());
    }

    #[test]
    fn adam_first_step() {
        let state = AdamState::new(&single(0.0), AdamConfig::default());
        let (p, s) = adam_step(&single(0.0), &single(1.0), &state).unwrap();
        // m_hat = 1, v_hat = 1, update = 1e-3 / (1 + 1e-8)
        assert!((value(&p) + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.t, 1);
        let (q, _) = adam_step(&single(0.5), &single(0.0), &state).unwrap();
        assert_eq!(value(&q), 0.5);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = single(1.0);
            let mut s = AdamState::new(&p, AdamConfig::default());
            for k in 0..20 {
                let g = single(2.0 * value(&p) + k as f64 * 0.01);
                (p, s) = adam_step(&p, &g, &s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tape_step_matches_value_step() {
        let theta = single(0.75);
        let grad = single(-0.3);
        let mut tape = Tape::new();
        let nodes = theta.to_leaves(&mut tape);
        let g = grad.to_constants(&mut tape);
        let next = gd_step_on_tape(&mut tape, &nodes, &g.ids(), 0.05).unwrap();
        let value_step = gd_step(&theta, &grad, GdConfig::new(0.05).unwrap()).unwrap();
        assert_eq!(next.values(&tape), value_step);
    }
}
