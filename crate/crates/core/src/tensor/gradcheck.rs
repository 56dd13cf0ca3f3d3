//! Central-difference gradient verification, always in f64.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Builds a scalar loss from fresh parameter tensors.
pub type LossBuilder = fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>;

/// One op under test: input shapes, a per-input sampler mapping raw
/// uniform [-1, 1) draws into the op's safe domain, and the loss builder.
pub struct OpCheck {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub sample: fn(usize, f64) -> f64,
    pub build: LossBuilder,
}

impl OpCheck {
    /// Draw a full input set for this check from `seed`.
    pub fn draw_inputs(&self, seed: u64) -> Vec<(Vec<usize>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| (self.sample)(i, rng.gen::<f64>() * 2.0 - 1.0)).collect();
                (shape.to_vec(), data)
            })
            .collect()
    }
}

/// Max relative error between analytic and central-difference gradients over
/// every element of every input. Relative error uses
/// `|a - n| / max(|a|, |n|, 1)`; any non-finite comparison reports infinity.
pub fn grad_check(
    build: &dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let params: Vec<Tensor<f64>> =
        inputs.iter().map(|(s, d)| tape.param(s, d.clone())).collect::<Result<_>>()?;
    let loss = build(&tape, &params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> =
        params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let eval = |pi: usize, j: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new();
        let params: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(qi, (s, d))| {
                let mut d = d.clone();
                if qi == pi {
                    d[j] += delta;
                }
                tape.param(s, d)
            })
            .collect::<Result<_>>()?;
        build(&tape, &params)?.item()
    };

    let mut max_rel = 0.0f64;
    for (pi, (_, data)) in inputs.iter().enumerate() {
        for j in 0..data.len() {
            let numeric = (eval(pi, j, eps)? - eval(pi, j, -eps)?) / (2.0 * eps);
            let a = analytic[pi][j];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            let rel = (a - numeric).abs() / denom;
            max_rel = max_rel.max(if rel.is_finite() { rel } else { f64::INFINITY });
        }
    }
    Ok(max_rel)
}

fn ident(_: usize, r: f64) -> f64 {
    r
}

/// Keep inputs at least 0.25 away from the relu/abs kink.
fn off_kink(_: usize, r: f64) -> f64 {
    r + if r < 0.0 { -0.25 } else { 0.25 }
}

/// Strictly positive inputs for log.
fn positive(_: usize, r: f64) -> f64 {
    r.exp() + 0.1
}

/// Nonzero inputs of both signs for the gating chain.
fn nonzero(_: usize, r: f64) -> f64 {
    off_kink(0, r)
}

/// Every op with a backward rule, exercised through a scalar loss.
pub fn standard_op_checks() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "matmul",
            shapes: &[&[3, 4], &[4, 2]],
            sample: ident,
            build: |_t, p| Ok(p[0].matmul(&p[1])?.sum_all()),
        },
        OpCheck {
            name: "add_broadcast",
            shapes: &[&[3, 4], &[1, 4]],
            sample: ident,
            build: |_t, p| Ok(p[0].add(&p[1])?.sigmoid().sum_all()),
        },
        OpCheck {
            name: "sub",
            shapes: &[&[2, 3], &[2, 3]],
            sample: ident,
            build: |_t, p| {
                let d = p[0].sub(&p[1])?;
                Ok(d.mul(&d)?.sum_all())
            },
        },
        OpCheck {
            name: "mul_broadcast",
            shapes: &[&[3, 4], &[1, 4]],
            sample: ident,
            build: |_t, p| Ok(p[0].mul(&p[1])?.sum_all()),
        },
        OpCheck {
            name: "scale_add_scalar",
            shapes: &[&[5]],
            sample: ident,
            build: |_t, p| Ok(p[0].scale(-1.7).add_scalar(0.3).sigmoid().sum_all()),
        },
        OpCheck {
            name: "relu",
            shapes: &[&[4, 3]],
            sample: off_kink,
            build: |_t, p| Ok(p[0].relu().sum_all()),
        },
        OpCheck {
            name: "sigmoid",
            shapes: &[&[7]],
            sample: ident,
            build: |_t, p| Ok(p[0].sigmoid().sum_all()),
        },
        OpCheck {
            name: "log",
            shapes: &[&[6]],
            sample: positive,
            build: |_t, p| Ok(p[0].log()?.sum_all()),
        },
        OpCheck {
            name: "abs",
            shapes: &[&[6]],
            sample: off_kink,
            build: |_t, p| Ok(p[0].abs().sum_all()),
        },
        OpCheck {
            name: "gate_chain",
            shapes: &[&[5]],
            sample: nonzero,
            build: |_t, p| Ok(p[0].abs().add_scalar(1e-12).log()?.sigmoid().sum_all()),
        },
        OpCheck {
            name: "concat_narrow",
            shapes: &[&[3, 2], &[3, 3]],
            sample: ident,
            build: |_t, p| {
                let c = Tensor::concat(&[p[0].clone(), p[1].clone()], 1)?;
                let left = c.narrow(1, 1, 3)?;
                Ok(left.mul(&left)?.sum_all())
            },
        },
        OpCheck {
            name: "reduce_max",
            shapes: &[&[4, 5]],
            sample: ident,
            build: |_t, p| Ok(p[0].reduce_max(1)?.sum_all()),
        },
        OpCheck {
            name: "reduce_sum_mean",
            shapes: &[&[3, 4]],
            sample: ident,
            build: |_t, p| Ok(p[0].reduce_sum(0)?.sigmoid().mean_all()),
        },
        OpCheck {
            name: "transpose_matmul",
            shapes: &[&[3, 4], &[3, 2]],
            sample: ident,
            build: |_t, p| Ok(p[0].transpose2()?.matmul(&p[1])?.sum_all()),
        },
        OpCheck {
            name: "gather_rows",
            shapes: &[&[4, 3]],
            sample: ident,
            build: |_t, p| {
                let rows = Arc::new(vec![2u32, 0, 2, 3, 1, 2]);
                let g = p[0].gather_rows(rows)?;
                Ok(g.mul(&g)?.sum_all())
            },
        },
        OpCheck {
            name: "repeat_rows",
            shapes: &[&[3, 2]],
            sample: ident,
            build: |_t, p| {
                let r = p[0].repeat_rows(3)?;
                Ok(r.sigmoid().sum_all())
            },
        },
        OpCheck {
            name: "gather_flat",
            shapes: &[&[2, 3]],
            sample: ident,
            build: |_t, p| {
                let idx = Arc::new(vec![5u32, 0, 3, 3, 1]);
                let g = p[0].gather_flat(idx, &[5, 1])?;
                Ok(g.mul(&g)?.sum_all())
            },
        },
        OpCheck {
            name: "softmax_cross_entropy",
            shapes: &[&[3, 4]],
            sample: ident,
            build: |_t, p| p[0].softmax_cross_entropy(&[1, 3, 0]),
        },
        OpCheck {
            name: "conv2d",
            shapes: &[&[2, 5, 5, 2], &[8, 3], &[1, 3]],
            sample: ident,
            build: |_t, p| Ok(p[0].conv2d(&p[1], &p[2], 2, 2, 2)?.relu().sum_all()),
        },
    ]
}
