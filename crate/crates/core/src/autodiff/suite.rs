//! Finite-difference checks of every graph operation, runnable outside the
//! test harness (the `grad-check` command uses it).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::Conv1dSpec;
use super::gradcheck::finite_diff_check;
use super::graph::{Graph, Tensor};
use crate::error::Result;

pub const OP_STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn random(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn off_kink(mut v: Vec<f64>, gap: f64) -> Vec<f64> {
    for x in &mut v {
        if x.abs() < gap {
            *x += if *x < 0.0 { -gap } else { gap };
        }
    }
    v
}

fn probe(g: &mut Graph, y: Tensor, seed: u64) -> Result<Tensor> {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let r = g.constant(random(seed, n), &shape)?;
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Check = Box<dyn Fn() -> Result<f64>>;

fn unary(x: Vec<f64>, shape: &'static [usize], op: fn(&mut Graph, Tensor) -> Result<Tensor>) -> Check {
    Box::new(move || {
        finite_diff_check(
            |g, t| {
                let y = op(g, t)?;
                probe(g, y, 99)
            },
            &x,
            shape,
            OP_STEP,
        )
    })
}

/// Checks gradients of a binary op with respect to each operand in turn.
fn binary(a: Vec<f64>, sa: &'static [usize], b: Vec<f64>, sb: &'static [usize], op: fn(&mut Graph, Tensor, Tensor) -> Result<Tensor>) -> Check {
    Box::new(move || {
        let wrt_a = finite_diff_check(
            |g, t| {
                let other = g.constant(b.clone(), sb)?;
                let y = op(g, t, other)?;
                probe(g, y, 98)
            },
            &a,
            sa,
            OP_STEP,
        )?;
        let wrt_b = finite_diff_check(
            |g, t| {
                let other = g.constant(a.clone(), sa)?;
                let y = op(g, other, t)?;
                probe(g, y, 98)
            },
            &b,
            sb,
            OP_STEP,
        )?;
        Ok(wrt_a.max(wrt_b))
    })
}

fn conv_check(spec: Conv1dSpec, cin: usize, cout: usize, k: usize, len: usize) -> Check {
    Box::new(move || {
        let x = random(1, cin * len);
        let w = random(2, cout * (cin / spec.groups) * k);
        let b = random(3, cout);
        let xs = [cin, len];
        let ws = [cout, cin / spec.groups, k];
        let mut worst = 0.0f64;
        for which in 0..3 {
            let (val, shape): (&[f64], &[usize]) = match which {
                0 => (&x, &xs),
                1 => (&w, &ws),
                _ => (&b, &[cout]),
            };
            let e = finite_diff_check(
                |g, t| {
                    let xt = if which == 0 { t } else { g.constant(x.clone(), &xs)? };
                    let wt = if which == 1 { t } else { g.constant(w.clone(), &ws)? };
                    let bt = if which == 2 { t } else { g.constant(b.clone(), &[cout])? };
                    let y = g.conv1d(xt, wt, Some(bt), spec)?;
                    probe(g, y, 97)
                },
                val,
                shape,
                OP_STEP,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })
}

fn conv_transpose_check() -> Check {
    Box::new(|| {
        let (cin, t, k, stride) = (3, 5, 4, 2);
        let x = random(4, cin * t);
        let w = random(5, cin * k);
        let b = random(6, 1);
        let mut worst = 0.0f64;
        for which in 0..3 {
            let (val, shape): (&[f64], &[usize]) = match which {
                0 => (&x, &[cin, t]),
                1 => (&w, &[cin, 1, k]),
                _ => (&b, &[1]),
            };
            let e = finite_diff_check(
                |g, v| {
                    let xt = if which == 0 { v } else { g.constant(x.clone(), &[cin, t])? };
                    let wt = if which == 1 { v } else { g.constant(w.clone(), &[cin, 1, k])? };
                    let bt = if which == 2 { v } else { g.constant(b.clone(), &[1])? };
                    let y = g.conv_transpose1d(xt, wt, Some(bt), stride)?;
                    probe(g, y, 96)
                },
                val,
                shape,
                OP_STEP,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })
}

fn gln_check() -> Check {
    Box::new(|| {
        let x = random(7, 12);
        let gamma = random(8, 3);
        let beta = random(9, 3);
        let mut worst = 0.0f64;
        for which in 0..3 {
            let (val, shape): (&[f64], &[usize]) = match which {
                0 => (&x, &[3, 4]),
                1 => (&gamma, &[3]),
                _ => (&beta, &[3]),
            };
            let e = finite_diff_check(
                |g, v| {
                    let xt = if which == 0 { v } else { g.constant(x.clone(), &[3, 4])? };
                    let gt = if which == 1 { v } else { g.constant(gamma.clone(), &[3])? };
                    let bt = if which == 2 { v } else { g.constant(beta.clone(), &[3])? };
                    let y = g.global_layer_norm(xt, gt, bt)?;
                    probe(g, y, 95)
                },
                val,
                shape,
                OP_STEP,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })
}

fn named() -> Vec<(&'static str, Check)> {
    let m6 = || random(10, 6);
    vec![
        ("add", binary(m6(), &[2, 3], random(11, 6), &[2, 3], |g, a, b| g.add(a, b))),
        ("sub", binary(m6(), &[2, 3], random(11, 6), &[2, 3], |g, a, b| g.sub(a, b))),
        ("mul", binary(m6(), &[2, 3], random(11, 6), &[2, 3], |g, a, b| g.mul(a, b))),
        ("matmul", binary(m6(), &[2, 3], random(12, 12), &[3, 4], |g, a, b| g.matmul(a, b))),
        ("dense", binary(m6(), &[2, 3], random(12, 12), &[4, 3], |g, a, b| g.dense(a, b, None))),
        ("scale_by", binary(m6(), &[2, 3], vec![0.7], &[1], |g, a, s| g.scale_by(a, s))),
        ("prelu", binary(off_kink(m6(), 0.05), &[2, 3], vec![0.25], &[1], |g, a, s| g.prelu(a, s))),
        ("mse", binary(m6(), &[2, 3], random(11, 6), &[2, 3], |g, a, b| g.mse(a, b))),
        ("scale", unary(m6(), &[2, 3], |g, a| Ok(g.scale(a, -1.7)))),
        ("add_scalar", unary(m6(), &[2, 3], |g, a| Ok(g.add_scalar(a, 0.3)))),
        ("relu", unary(off_kink(m6(), 0.05), &[2, 3], |g, a| Ok(g.relu(a)))),
        ("sigmoid", unary(m6(), &[2, 3], |g, a| Ok(g.sigmoid(a)))),
        ("abs", unary(off_kink(m6(), 0.05), &[2, 3], |g, a| Ok(g.abs(a)))),
        ("square", unary(m6(), &[2, 3], |g, a| Ok(g.square(a)))),
        ("ln", unary(m6().iter().map(|v| v.abs() + 0.5).collect(), &[2, 3], |g, a| Ok(g.ln(a)))),
        ("transpose", unary(m6(), &[2, 3], |g, a| g.transpose(a))),
        ("reshape", unary(m6(), &[2, 3], |g, a| g.reshape(a, &[3, 2]))),
        ("narrow", unary(m6(), &[2, 3], |g, a| g.narrow(a, 1, 1, 2))),
        ("gather_rows", unary(m6(), &[3, 2], |g, a| g.gather_rows(a, &[2, 0, 2]))),
        ("broadcast_rows", unary(random(13, 3), &[1, 3], |g, a| g.broadcast_rows(a, 4))),
        ("sum", unary(m6(), &[2, 3], |g, a| Ok(g.sum(a)))),
        ("mean", unary(m6(), &[2, 3], |g, a| Ok(g.mean(a)))),
        ("conv1d", conv_check(Conv1dSpec::default(), 2, 3, 3, 8)),
        (
            "conv1d_strided_dilated_grouped",
            conv_check(
                Conv1dSpec {
                    stride: 2,
                    dilation: 2,
                    groups: 2,
                    padding: 2,
                },
                4,
                2,
                3,
                9,
            ),
        ),
        ("conv_transpose1d", conv_transpose_check()),
        ("global_layer_norm", gln_check()),
    ]
}

/// Runs every operation check. Each reports the worst relative error over
/// all input coordinates and operands.
pub fn op_suite() -> Result<Vec<CheckResult>> {
    named()
        .into_iter()
        .map(|(name, check)| {
            Ok(CheckResult {
                name: name.to_string(),
                error: check()?,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}
