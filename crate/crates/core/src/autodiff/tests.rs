use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn random(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Moves every value at least `gap` away from zero, keeping its sign.
fn off_kink(mut v: Vec<f64>, gap: f64) -> Vec<f64> {
    for x in &mut v {
        if x.abs() < gap {
            *x = if *x < 0.0 { -gap } else { gap } + *x;
        }
    }
    v
}

/// Reduces a tensor to a scalar through fixed random weights so that no
/// coordinate's gradient is structurally zero.
fn probe(g: &mut Graph, y: Tensor, seed: u64) -> Result<Tensor> {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let r = g.constant(random(seed, n), &shape)?;
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new();
    let x = g.constant(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
    let w = g.constant(vec![1.0, 1.0], &[1, 1, 2]).unwrap();
    let y = g.conv1d(x, w, None, Conv1dSpec::default()).unwrap();
    assert_eq!(g.value(y), &[3.0, 5.0]);

    let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
    let spec = Conv1dSpec {
        dilation: 2,
        ..Default::default()
    };
    let y = g.conv1d(x, w, None, spec).unwrap();
    assert_eq!(g.value(y), &[4.0, 6.0]);
}

#[test]
fn conv1d_output_length_formula() {
    let spec = Conv1dSpec {
        stride: 3,
        dilation: 2,
        groups: 1,
        padding: 2,
    };
    // floor((10 + 4 - 2*2 - 1)/3) + 1 = 4
    assert_eq!(spec.output_len(10, 3), Some(4));
    let mut g = Graph::new();
    let x = g.constant(random(1, 20), &[2, 10]).unwrap();
    let w = g.constant(random(2, 18), &[3, 2, 3]).unwrap();
    let y = g.conv1d(x, w, None, spec).unwrap();
    assert_eq!(g.shape(y), &[3, 4]);
}

#[test]
fn conv1d_rejects_shape_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(random(1, 12), &[3, 4]).unwrap();
    let w = g.constant(random(2, 4), &[2, 2, 1]).unwrap();
    assert!(g.conv1d(x, w, None, Conv1dSpec::default()).is_err());
    let w3 = g.constant(random(2, 6), &[2, 3, 1]).unwrap();
    let grouped = Conv1dSpec {
        groups: 2,
        ..Default::default()
    };
    assert!(g.conv1d(x, w3, None, grouped).is_err());
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let x0 = random(10, 4 * 7);
    let w0 = random(11, 6 * 2 * 3);
    let b0 = random(12, 6);
    let spec = Conv1dSpec {
        stride: 2,
        dilation: 2,
        groups: 2,
        padding: 2,
    };
    let wrt_x = finite_diff_check(
        |g, x| {
            let w = g.constant(w0.clone(), &[6, 2, 3])?;
            let b = g.constant(b0.clone(), &[6])?;
            let y = g.conv1d(x, w, Some(b), spec)?;
            probe(g, y, 1)
        },
        &x0,
        &[4, 7],
        H,
    )
    .unwrap();
    let wrt_w = finite_diff_check(
        |g, w| {
            let x = g.constant(x0.clone(), &[4, 7])?;
            let y = g.conv1d(x, w, None, spec)?;
            probe(g, y, 2)
        },
        &w0,
        &[6, 2, 3],
        H,
    )
    .unwrap();
    let wrt_b = finite_diff_check(
        |g, b| {
            let x = g.constant(x0.clone(), &[4, 7])?;
            let w = g.constant(w0.clone(), &[6, 2, 3])?;
            let y = g.conv1d(x, w, Some(b), spec)?;
            probe(g, y, 3)
        },
        &b0,
        &[6],
        H,
    )
    .unwrap();
    assert!(wrt_x <= 1e-6, "{wrt_x}");
    assert!(wrt_w <= 1e-6, "{wrt_w}");
    assert!(wrt_b <= 1e-6, "{wrt_b}");
}

#[test]
fn conv_transpose_gradients() {
    let x0 = random(20, 3 * 5);
    let w0 = random(21, 3 * 2 * 4);
    let b0 = random(22, 2);
    for (which, seed) in [(0usize, 4u64), (1, 5), (2, 6)] {
        let err = match which {
            0 => finite_diff_check(
                |g, x| {
                    let w = g.constant(w0.clone(), &[3, 2, 4])?;
                    let y = g.conv_transpose1d(x, w, None, 2)?;
                    probe(g, y, seed)
                },
                &x0,
                &[3, 5],
                H,
            ),
            1 => finite_diff_check(
                |g, w| {
                    let x = g.constant(x0.clone(), &[3, 5])?;
                    let y = g.conv_transpose1d(x, w, None, 2)?;
                    probe(g, y, seed)
                },
                &w0,
                &[3, 2, 4],
                H,
            ),
            _ => finite_diff_check(
                |g, b| {
                    let x = g.constant(x0.clone(), &[3, 5])?;
                    let w = g.constant(w0.clone(), &[3, 2, 4])?;
                    let y = g.conv_transpose1d(x, w, Some(b), 2)?;
                    probe(g, y, seed)
                },
                &b0,
                &[2],
                H,
            ),
        }
        .unwrap();
        assert!(err <= TOL, "input {which}: {err}");
    }
}

#[test]
fn conv_transpose_is_adjoint_of_strided_conv() {
    // <conv(x), y> == <x, conv_transpose(y)> for matching weights.
    let mut g = Graph::new();
    let x = g.constant(random(1, 2 * 17), &[2, 17]).unwrap();
    let w = g.constant(random(2, 3 * 2 * 5), &[3, 2, 5]).unwrap();
    let spec = Conv1dSpec {
        stride: 3,
        ..Default::default()
    };
    let cx = g.conv1d(x, w, None, spec).unwrap();
    let t = g.shape(cx)[1];
    let y = g.constant(random(3, 3 * t), &[3, t]).unwrap();
    // conv weight [c_out, c_in, k] is the transpose weight [c_in', c_out', k].
    let ty = g.conv_transpose1d(y, w, None, 3).unwrap();
    let lhs: f64 = g.value(cx).iter().zip(g.value(y)).map(|(a, b)| a * b).sum();
    let tyv = g.value(ty);
    let tlen = g.shape(ty)[1];
    let xv = g.value(x);
    let rhs: f64 = (0..2).map(|c| (0..17.min(tlen)).map(|i| xv[c * 17 + i] * tyv[c * tlen + i]).sum::<f64>()).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn elementwise_and_reduction_gradients() {
    let x0 = off_kink(random(30, 12), 1e-3);
    let other = random(31, 12);
    type Unary = fn(&mut Graph, Tensor, Tensor) -> Result<Tensor>;
    let cases: Vec<(&str, Unary)> = vec![
        ("add", |g, x, o| g.add(x, o)),
        ("sub", |g, x, o| g.sub(o, x)),
        ("mul", |g, x, o| g.mul(x, o)),
        ("mul_self", |g, x, _| g.mul(x, x)),
        ("scale", |g, x, _| Ok(g.scale(x, -2.5))),
        ("add_scalar", |g, x, _| Ok(g.add_scalar(x, 0.7))),
        ("relu", |g, x, _| Ok(g.relu(x))),
        ("sigmoid", |g, x, _| Ok(g.sigmoid(x))),
        ("abs", |g, x, _| Ok(g.abs(x))),
        ("square", |g, x, _| Ok(g.square(x))),
        ("ln", |g, x, _| {
            let s = g.square(x);
            let s = g.add_scalar(s, 0.1);
            Ok(g.ln(s))
        }),
        ("transpose", |g, x, _| {
            let m = g.reshape(x, &[3, 4])?;
            g.transpose(m)
        }),
        ("narrow0", |g, x, _| {
            let m = g.reshape(x, &[3, 4])?;
            g.narrow(m, 0, 1, 2)
        }),
        ("narrow1", |g, x, _| {
            let m = g.reshape(x, &[3, 4])?;
            g.narrow(m, 1, 1, 2)
        }),
        ("gather", |g, x, _| {
            let m = g.reshape(x, &[4, 3])?;
            g.gather_rows(m, &[3, 0, 3])
        }),
        ("broadcast", |g, x, _| {
            let m = g.reshape(x, &[4, 3])?;
            let r = g.narrow(m, 0, 2, 1)?;
            g.broadcast_rows(r, 5)
        }),
        ("scale_by", |g, x, o| {
            let m = g.reshape(x, &[12, 1])?;
            let s = g.narrow(m, 0, 4, 1)?;
            let s = g.reshape(s, &[1])?;
            g.scale_by(o, s)
        }),
        ("sum", |g, x, _| Ok(g.sum(x))),
        ("mean", |g, x, _| Ok(g.mean(x))),
        ("mse", |g, x, o| g.mse(x, o)),
    ];
    for (i, (name, op)) in cases.into_iter().enumerate() {
        let err = finite_diff_check(
            |g, x| {
                let o = g.constant(other.clone(), &[12])?;
                let y = op(g, x, o)?;
                probe(g, y, 100 + i as u64)
            },
            &x0,
            &[12],
            H,
        )
        .unwrap();
        assert!(err <= TOL, "{name}: {err}");
    }
}

#[test]
fn matmul_and_dense_gradients() {
    let a0 = random(40, 3 * 4);
    let b0 = random(41, 4 * 5);
    let err_a = finite_diff_check(
        |g, a| {
            let b = g.constant(b0.clone(), &[4, 5])?;
            let y = g.matmul(a, b)?;
            probe(g, y, 1)
        },
        &a0,
        &[3, 4],
        H,
    )
    .unwrap();
    let err_b = finite_diff_check(
        |g, b| {
            let a = g.constant(a0.clone(), &[3, 4])?;
            let y = g.matmul(a, b)?;
            probe(g, y, 2)
        },
        &b0,
        &[4, 5],
        H,
    )
    .unwrap();
    let w0 = random(42, 2 * 4);
    let err_dense = finite_diff_check(
        |g, w| {
            let x = g.constant(a0.clone(), &[3, 4])?;
            let b = g.constant(vec![0.3, -0.2], &[2])?;
            let y = g.dense(x, w, Some(b))?;
            probe(g, y, 3)
        },
        &w0,
        &[2, 4],
        H,
    )
    .unwrap();
    assert!(err_a <= TOL && err_b <= TOL && err_dense <= TOL, "{err_a} {err_b} {err_dense}");
}

#[test]
fn prelu_gradients() {
    let x0 = off_kink(random(50, 10), 1e-3);
    let err_x = finite_diff_check(
        |g, x| {
            let a = g.constant(vec![0.25], &[1])?;
            let y = g.prelu(x, a)?;
            probe(g, y, 1)
        },
        &x0,
        &[10],
        H,
    )
    .unwrap();
    let err_a = finite_diff_check(
        |g, a| {
            let x = g.constant(x0.clone(), &[10])?;
            let y = g.prelu(x, a)?;
            probe(g, y, 2)
        },
        &[0.25],
        &[1],
        H,
    )
    .unwrap();
    assert!(err_x <= TOL && err_a <= TOL, "{err_x} {err_a}");
}

#[test]
fn layer_norm_normalizes_and_differentiates() {
    let mut g = Graph::new();
    let x = g.constant(random(60, 4 * 6).iter().map(|v| 3.0 * v + 1.0).collect(), &[4, 6]).unwrap();
    let gamma = g.constant(vec![1.0; 4], &[4]).unwrap();
    let beta = g.constant(vec![0.0; 4], &[4]).unwrap();
    let y = g.global_layer_norm(x, gamma, beta).unwrap();
    let v = g.value(y);
    let mean = v.iter().sum::<f64>() / 24.0;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 24.0;
    assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);

    let x0 = random(61, 4 * 6);
    let g0 = random(62, 4);
    let b0 = random(63, 4);
    let wrt = |which: usize| {
        finite_diff_check(
            |g, t| {
                let x = if which == 0 { t } else { g.constant(x0.clone(), &[4, 6])? };
                let ga = if which == 1 { t } else { g.constant(g0.clone(), &[4])? };
                let be = if which == 2 { t } else { g.constant(b0.clone(), &[4])? };
                let y = g.global_layer_norm(x, ga, be)?;
                probe(g, y, 7)
            },
            match which {
                0 => &x0,
                1 => &g0,
                _ => &b0,
            },
            if which == 0 { &[4, 6] } else { &[4] },
            H,
        )
        .unwrap()
    };
    for which in 0..3 {
        let e = wrt(which);
        assert!(e <= TOL, "input {which}: {e}");
    }
}

#[test]
fn sigmoid_of_zero_is_half() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!((sigmoid(-3.0) - (1.0 - sigmoid(3.0))).abs() < 1e-15);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.variable(random(70, 5), &[5]).unwrap();
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 5]);

    let mut g = Graph::new();
    let x = g.variable(random(71, 5), &[5]).unwrap();
    let d = g.detach(x);
    let l = g.mse(x, d).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| *v == 0.0));

    let mut g = Graph::new();
    let x = g.variable(random(72, 5), &[5]).unwrap();
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_is_deterministic_across_insertion_orders() {
    // Same function with independent branches recorded in opposite order.
    let build = |swap: bool| {
        let mut g = Graph::new();
        let x = g.variable(random(80, 6), &[6]).unwrap();
        let (a, b) = if swap {
            let b = g.sigmoid(x);
            let a = g.square(x);
            (a, b)
        } else {
            let a = g.square(x);
            let b = g.sigmoid(x);
            (a, b)
        };
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let (u, v) = (build(false), build(true));
    for (a, b) in u.iter().zip(&v) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(build(false), build(false));
}

#[test]
fn gradcheck_self_tests() {
    let e = finite_diff_check(
        |g, x| {
            let s = g.square(x);
            Ok(g.sum(s))
        },
        &[1.0, 2.0],
        &[2],
        H,
    )
    .unwrap();
    assert!(e <= 1e-9, "{e}");
    let mut g = Graph::new();
    let x = g.variable(vec![1.0, 2.0], &[2]).unwrap();
    let s = g.square(x);
    let l = g.sum(s);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);

    let e = finite_diff_check(
        |g, x| {
            let s = g.sigmoid(x);
            Ok(g.sum(s))
        },
        &random(90, 8),
        &[8],
        H,
    )
    .unwrap();
    assert!(e <= 1e-7, "{e}");
}

#[test]
fn params_bind_once_and_accumulate() {
    let mut store = ParamStore::new();
    let id = store.add(Parameter::new("w", &[2], vec![1.0, -1.0]));
    for _ in 0..2 {
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let s = g.square(a);
        let l = g.sum(s);
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut store);
    }
    assert_eq!(store.get(id).grad.as_deref(), Some(&[4.0, -4.0][..]));
}
