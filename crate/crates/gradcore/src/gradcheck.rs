//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only evaluates forward passes, so it stays independent
//! of every backward rule it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Builds a scalar loss from parameters already in the store.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

/// Worst norm-wise relative error between analytic and central-difference
/// gradients over every parameter in `store`.
pub fn max_relative_error(store: &ParamStore<f64>, loss: &LossFn<'_>, step: f64) -> Result<f64> {
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let l = loss(&mut g, &analytic)?;
    g.backward(l, &mut analytic)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, s)?;
        Ok(g.value(l).data()[0])
    };

    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut probe = store.clone();
    for name in names {
        let n = probe.get(&name).unwrap().len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let a = analytic.grad(&name).unwrap().data();
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    Ok(worst)
}

/// Result of checking one operation over several random shapes.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub worst: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Projects a tensor onto a random direction so every output entry gets a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, g.shape(y), 1.0);
    let r = g.constant(r)?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

type Case = (ParamStore<f64>, Box<LossFn<'static>>);

fn store_of(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).unwrap();
    }
    s
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn make_case(op: &'static str, rng: &mut ChaCha8Rng, seed: u64) -> Case {
    match op {
        "linear" => {
            let (b, i, o) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
            let s = store_of(vec![
                ("x", rand_tensor(rng, &[b, i], 1.0)),
                ("w", rand_tensor(rng, &[i, o], 1.0)),
                ("b", rand_tensor(rng, &[o], 1.0)),
            ]);
            (
                s,
                Box::new(move |g, s| {
                    let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                    let y = g.linear(x, w, Some(b))?;
                    project(g, y, seed)
                }),
            )
        }
        "add" | "sub" | "mul" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
            let s = store_of(vec![
                ("a", rand_tensor(rng, &shape, 1.0)),
                ("b", rand_tensor(rng, &shape, 1.0)),
            ]);
            (
                s,
                Box::new(move |g, s| {
                    let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
                    let y = match op {
                        "add" => g.add(a, b)?,
                        "sub" => g.sub(a, b)?,
                        _ => g.mul(a, b)?,
                    };
                    project(g, y, seed)
                }),
            )
        }
        "scale" => {
            let n = dim(rng, 1, 6);
            let s = store_of(vec![("a", rand_tensor(rng, &[n], 1.0))]);
            let f = rng.random_range(-2.0..2.0);
            (
                s,
                Box::new(move |g, s| {
                    let a = g.param(s, "a")?;
                    let y = g.scale(a, f)?;
                    project(g, y, seed)
                }),
            )
        }
        "add_bias_last" | "add_bias_mid" => {
            let (b, m, l) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            let bias_shape = if op == "add_bias_last" {
                [b, m]
            } else {
                [b, l]
            };
            let s = store_of(vec![
                ("x", rand_tensor(rng, &[b, m, l], 1.0)),
                ("b", rand_tensor(rng, &bias_shape, 1.0)),
            ]);
            (
                s,
                Box::new(move |g, s| {
                    let (x, b) = (g.param(s, "x")?, g.param(s, "b")?);
                    let y = if op == "add_bias_last" {
                        g.add_bias_last(x, b)?
                    } else {
                        g.add_bias_mid(x, b)?
                    };
                    project(g, y, seed)
                }),
            )
        }
        "silu" | "gelu" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
            let s = store_of(vec![("x", rand_tensor(rng, &shape, 3.0))]);
            (
                s,
                Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = if op == "silu" { g.silu(x)? } else { g.gelu(x)? };
                    project(g, y, seed)
                }),
            )
        }
        "layer_norm" => {
            let (r, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
            let s = store_of(vec![
                ("x", rand_tensor(rng, &[r, d], 2.0)),
                ("gain", rand_tensor(rng, &[d], 1.5)),
                ("bias", rand_tensor(rng, &[d], 1.0)),
            ]);
            (
                s,
                Box::new(move |g, s| {
                    let (x, ga, b) = (g.param(s, "x")?, g.param(s, "gain")?, g.param(s, "bias")?);
                    let y = g.layer_norm(x, ga, b, 1e-5)?;
                    project(g, y, seed)
                }),
            )
        }
        "softmax" => {
            let shape = [dim(rng, 1, 3), dim(rng, 2, 6)];
            let s = store_of(vec![("x", rand_tensor(rng, &shape, 2.0))]);
            (
                s,
                Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.softmax(x)?;
                    project(g, y, seed)
                }),
            )
        }
        "conv1d" => {
            let (b, ci, co, l) = (
                dim(rng, 1, 2),
                dim(rng, 1, 3),
                dim(rng, 1, 3),
                dim(rng, 3, 8),
            );
            let k = [1, 3][rng.random_range(0..2)];
            let stride = dim(rng, 1, 2);
            let pad = k / 2;
            let s = store_of(vec![
                ("x", rand_tensor(rng, &[b, ci, l], 1.0)),
                ("w", rand_tensor(rng, &[co, ci, k], 1.0)),
                ("b", rand_tensor(rng, &[co], 1.0)),
            ]);
            (
                s,
                Box::new(move |g, s| {
                    let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                    let y = g.conv1d(x, w, b, stride, pad)?;
                    project(g, y, seed)
                }),
            )
        }
        "upsample" => {
            let (b, c, l) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 5));
            let lo = l * 2 - rng.random_range(0..2);
            let s = store_of(vec![("x", rand_tensor(rng, &[b, c, l], 1.0))]);
            (
                s,
                Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.upsample_nearest(x, lo.max(1))?;
                    project(g, y, seed)
                }),
            )
        }
        "concat" => {
            let (b, c1, c2, l) = (
                dim(rng, 1, 2),
                dim(rng, 1, 3),
                dim(rng, 1, 3),
                dim(rng, 1, 4),
            );
            let axis = rng.random_range(1..3);
            let (sa, sb) = if axis == 1 {
                ([b, c1, l], [b, c2, l])
            } else {
                ([b, l, c1], [b, l, c2])
            };
            let s = store_of(vec![
                ("a", rand_tensor(rng, &sa, 1.0)),
                ("b", rand_tensor(rng, &sb, 1.0)),
            ]);
            (
                s,
                Box::new(move |g, s| {
                    let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
                    let y = g.concat(a, b, axis)?;
                    project(g, y, seed)
                }),
            )
        }
        "swap_last2" | "reshape" => {
            let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4)];
            let s = store_of(vec![("x", rand_tensor(rng, &shape, 1.0))]);
            (
                s,
                Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = if op == "swap_last2" {
                        g.swap_last2(x)?
                    } else {
                        g.reshape(x, &[shape[0] * shape[1], shape[2]])?
                    };
                    project(g, y, seed)
                }),
            )
        }
        "attention" => {
            let heads = dim(rng, 1, 2);
            let c = heads * dim(rng, 1, 3);
            let (b, l) = (dim(rng, 1, 2), dim(rng, 1, 4));
            let s = store_of(vec![("qkv", rand_tensor(rng, &[b, l, 3 * c], 1.5))]);
            (
                s,
                Box::new(move |g, s| {
                    let x = g.param(s, "qkv")?;
                    let y = g.attention(x, heads)?;
                    project(g, y, seed)
                }),
            )
        }
        "sum" | "mean" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
            let s = store_of(vec![("x", rand_tensor(rng, &shape, 1.0))]);
            (
                s,
                Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.mul(x, x)?;
                    if op == "sum" {
                        g.sum(y)
                    } else {
                        g.mean(y)
                    }
                }),
            )
        }
        "mean_abs_error" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
            let pred = rand_tensor(rng, &shape, 1.0);
            // keep every residual away from the kink at zero
            let target = Tensor::from_fn(&shape, |i| {
                let off: f64 = rng.random_range(0.05..1.0);
                pred.data()[i] + if i % 2 == 0 { off } else { -off }
            });
            let s = store_of(vec![("p", pred)]);
            (
                s,
                Box::new(move |g, s| {
                    let p = g.param(s, "p")?;
                    g.mean_abs_error(p, target.clone())
                }),
            )
        }
        "softmax_cross_entropy" => {
            let (r, n) = (dim(rng, 1, 3), dim(rng, 2, 6));
            let mut target = rand_tensor(rng, &[r, n], 1.0);
            for row in target.data_mut().chunks_mut(n) {
                row.iter_mut().for_each(|v| *v = v.abs() + 0.01);
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= total);
            }
            let s = store_of(vec![("p", rand_tensor(rng, &[r, n], 2.0))]);
            (
                s,
                Box::new(move |g, s| {
                    let p = g.param(s, "p")?;
                    g.softmax_cross_entropy(p, target.clone())
                }),
            )
        }
        other => panic!("no gradient case for `{other}`"),
    }
}

/// Every differentiable operation on the tape.
pub const OPS: &[&str] = &[
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias_last",
    "add_bias_mid",
    "silu",
    "gelu",
    "layer_norm",
    "softmax",
    "conv1d",
    "upsample",
    "concat",
    "swap_last2",
    "reshape",
    "attention",
    "sum",
    "mean",
    "mean_abs_error",
    "softmax_cross_entropy",
];

/// Checks every op on `cases` random shapes with step `1e-5` in 64-bit.
pub fn op_suite(cases: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &op in OPS {
        let mut worst: f64 = 0.0;
        for case in 0..cases {
            let (store, loss) = make_case(op, &mut rng, seed.wrapping_add(case as u64));
            worst = worst.max(max_relative_error(&store, loss.as_ref(), 1e-5)?);
        }
        out.push(OpCheck { op, cases, worst });
    }
    Ok(out)
}
