//! Random-instance gradient checks for every layer kind.
//!
//! Each instance builds a small random graph, projects its output onto a
//! fixed random direction, and compares the engine's backward pass against
//! central finite differences of the forward pass. Inputs are generated away
//! from the kinks of relu/mfm/maxpool so the finite differences are valid.
#![allow(dead_code)]

use fgcm_engine::gradcheck::{central_difference, relative_error};
use fgcm_engine::{BatchNormState, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYER_KINDS: [&str; 9] = [
    "conv2d",
    "conv_transpose2d",
    "batchnorm2d",
    "leaky_relu",
    "relu",
    "mfm",
    "maxpool2d",
    "affine",
    "dropout",
];

pub const LOSS_KINDS: [&str; 2] = ["mse", "softmax_cross_entropy"];

pub const STEP: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero by `gap`.
fn off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let vals = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, vals).unwrap()
}

fn eval_loss(inst: &Instance, values: &[Tensor<f64>], proj: &[f64]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = (inst.build)(&mut g, &vars).unwrap();
    if proj.is_empty() {
        return g.value(out).values()[0];
    }
    let l = g.weighted_sum(out, proj.to_vec()).unwrap();
    g.value(l).values()[0]
}

/// Worst relative error over all inputs of one instance. Scalar outputs are
/// checked directly; other outputs are projected onto a random direction.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = (inst.build)(&mut g, &vars).unwrap();
    let out_len = g.value(out).len();
    let proj: Vec<f64> = if out_len == 1 {
        Vec::new()
    } else {
        (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let loss = if proj.is_empty() {
        out
    } else {
        g.weighted_sum(out, proj.clone()).unwrap()
    };
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(v);
        let base = inst.inputs.clone();
        let numeric = central_difference(
            |x| {
                let mut vals = base.clone();
                vals[i] = Tensor::new(base[i].shape().to_vec(), x.to_vec()).unwrap();
                eval_loss(inst, &vals, &proj)
            },
            inst.inputs[i].values(),
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn make_instance(kind: &str, rng: &mut ChaCha8Rng) -> Instance {
    match kind {
        "conv2d" => {
            let (n, c, f) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let k = rng.gen_range(1..4);
            let s = rng.gen_range(1..3);
            let p = rng.gen_range(0..2);
            let h = rng.gen_range(k.max(3)..7);
            let w = rng.gen_range(k.max(3)..7);
            Instance {
                inputs: vec![
                    uniform(rng, vec![n, c, h, w], -1.0, 1.0),
                    uniform(rng, vec![f, c, k, k], -1.0, 1.0),
                    uniform(rng, vec![f], -0.5, 0.5),
                ],
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), (s, s), (p, p))),
            }
        }
        "conv_transpose2d" => {
            let (n, f, c) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let k = rng.gen_range(2..5);
            let s = rng.gen_range(1..3);
            let p = rng.gen_range(0..2);
            let h = rng.gen_range(2..5);
            let w = rng.gen_range(2..5);
            Instance {
                inputs: vec![
                    uniform(rng, vec![n, f, h, w], -1.0, 1.0),
                    uniform(rng, vec![f, c, k, k], -1.0, 1.0),
                    uniform(rng, vec![c], -0.5, 0.5),
                ],
                build: Box::new(move |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), (s, s), (p, p))),
            }
        }
        "batchnorm2d" => {
            let (n, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (h, w) = (rng.gen_range(2..4), rng.gen_range(1..4));
            let train = rng.gen_bool(0.7);
            let state = BatchNormState {
                running_mean: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                running_var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
            };
            Instance {
                inputs: vec![
                    uniform(rng, vec![n, c, h, w], -2.0, 2.0),
                    uniform(rng, vec![c], 0.5, 1.5),
                    uniform(rng, vec![c], -0.5, 0.5),
                ],
                build: Box::new(move |g, v| {
                    let mut st = state.clone();
                    g.batchnorm2d(v[0], v[1], v[2], &mut st, train, 0.1, 1e-5)
                }),
            }
        }
        "leaky_relu" | "relu" => {
            let slope = if kind == "relu" { 0.0 } else { rng.gen_range(0.01..0.5) };
            let shape = vec![rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..5)];
            Instance {
                inputs: vec![off_zero(rng, shape, 0.05)],
                build: Box::new(move |g, v| g.leaky_relu(v[0], slope)),
            }
        }
        "mfm" => {
            let n = rng.gen_range(1..3);
            let half = rng.gen_range(1..4);
            let rank4 = rng.gen_bool(0.6);
            let inner = if rank4 { rng.gen_range(1..4) * rng.gen_range(1..4) } else { 1 };
            let mut vals = vec![0.0; n * 2 * half * inner];
            for s in 0..n {
                for i in 0..half * inner {
                    let a: f64 = rng.gen_range(-1.0..1.0);
                    let d = rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    vals[s * 2 * half * inner + i] = a;
                    vals[s * 2 * half * inner + half * inner + i] = a + d;
                }
            }
            let shape = if rank4 {
                let h = (1..=inner).rev().find(|d| inner % d == 0 && *d <= 3).unwrap_or(1);
                vec![n, 2 * half, h, inner / h]
            } else {
                vec![n, 2 * half]
            };
            Instance {
                inputs: vec![Tensor::new(shape, vals).unwrap()],
                build: Box::new(|g, v| g.mfm(v[0])),
            }
        }
        "maxpool2d" => {
            let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let k = rng.gen_range(1..4);
            let s = rng.gen_range(1..4);
            let (h, w) = (rng.gen_range(k..k + 4), rng.gen_range(k..k + 4));
            let count = n * c * h * w;
            // distinct values spaced 0.05 apart, shuffled
            let mut vals: Vec<f64> = (0..count).map(|i| i as f64 * 0.05 - 1.0).collect();
            for i in (1..count).rev() {
                let j = rng.gen_range(0..=i);
                vals.swap(i, j);
            }
            Instance {
                inputs: vec![Tensor::new(vec![n, c, h, w], vals).unwrap()],
                build: Box::new(move |g, v| g.maxpool2d(v[0], (k, k), (s, s))),
            }
        }
        "affine" => {
            let (n, d, m) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..5));
            Instance {
                inputs: vec![
                    uniform(rng, vec![n, d], -1.0, 1.0),
                    uniform(rng, vec![d, m], -1.0, 1.0),
                    uniform(rng, vec![m], -1.0, 1.0),
                ],
                build: Box::new(|g, v| g.affine(v[0], v[1], v[2])),
            }
        }
        "dropout" => {
            let p = rng.gen_range(0.1..0.6);
            let seed = rng.gen::<u64>();
            let shape = vec![rng.gen_range(1..4), rng.gen_range(2..9)];
            Instance {
                inputs: vec![uniform(rng, shape, -1.0, 1.0)],
                build: Box::new(move |g, v| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    g.dropout(v[0], p, true, &mut r)
                }),
            }
        }
        "mse" => {
            let shape = vec![rng.gen_range(1..4), rng.gen_range(1..6)];
            let target = uniform(rng, shape.clone(), -1.0, 1.0);
            Instance {
                inputs: vec![uniform(rng, shape, -1.0, 1.0)],
                build: Box::new(move |g, v| g.mse(v[0], &target)),
            }
        }
        "softmax_cross_entropy" => {
            let (n, k) = (rng.gen_range(1..5), rng.gen_range(2..5));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            Instance {
                inputs: vec![uniform(rng, vec![n, k], -2.0, 2.0)],
                build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
            }
        }
        other => panic!("unknown layer kind {other}"),
    }
}

/// conv2d -> mfm -> affine -> cross-entropy on random small tensors.
pub fn composite_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = 2;
    let x = uniform(rng, vec![n, 2, 4, 4], -1.0, 1.0);
    let w = uniform(rng, vec![4, 2, 3, 3], -0.7, 0.7);
    let b = uniform(rng, vec![4], -0.2, 0.2);
    let fw = uniform(rng, vec![2 * 2 * 2, 2], -0.7, 0.7);
    let fb = uniform(rng, vec![2], -0.2, 0.2);
    let labels = vec![0usize, 1];
    Instance {
        inputs: vec![x, w, b, fw, fb],
        build: Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), (1, 1), (0, 0))?;
            let y = g.mfm(y)?;
            let y = g.reshape(y, vec![2, 8])?;
            let y = g.affine(y, v[3], v[4])?;
            g.softmax_cross_entropy(y, &labels)
        }),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
