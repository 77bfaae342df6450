//! Shared oracles for the integration and acceptance tests.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulbnn::autodiff::{Graph, Tensor, Var};
use rulbnn::data::synthetic::{write_subset, SyntheticSpec};
use rulbnn::data::SubsetName;
use rulbnn::models::{kaiming_uniform, param_nodes, Architecture, Dropout, ModelKind, ModelSpec, Network};
use rulbnn::rng::StreamRng;

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that near-zero adjoints are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn uniform(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product::<usize>().max(1);
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Builds a graph over variable inputs and returns the output to check.
pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

/// Reduce `y` to a scalar with a fixed random projection, so every output
/// element contributes to the gradient.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Var {
    let rc = g.constant(r.clone());
    let p = g.mul(y, rc).unwrap();
    g.sum(p)
}

fn scalar_of(g: &mut Graph, inputs: &[Tensor], build: &Builder) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(g, &vars);
    g.forward(out).unwrap().item()
}

/// Largest relative error between reverse-mode adjoints and central
/// differences over `coords` (or all coordinates when `None`).
pub fn max_grad_error(case: &Case, coords: Option<&[(usize, usize)]>, h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    g.forward(out).unwrap();
    g.backward(out).unwrap();
    let adj: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().data().to_vec()).collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = case
                .inputs
                .iter()
                .enumerate()
                .flat_map(|(k, t)| (0..t.len()).map(move |j| (k, j)))
                .collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    for &(k, j) in coords {
        let mut up = case.inputs.clone();
        up[k].data_mut()[j] += h;
        let mut dn = case.inputs.clone();
        dn[k].data_mut()[j] -= h;
        let fu = scalar_of(&mut Graph::new(), &up, &case.build);
        let fd = scalar_of(&mut Graph::new(), &dn, &case.build);
        let num = (fu - fd) / (2.0 * h);
        worst = worst.max(rel_err(adj[k][j], num));
    }
    worst
}

fn dims(rng: &mut Rng64, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// A random instance of the named operator.
pub fn operator_case(op: &str, rng: &mut Rng64) -> Case {
    let shape = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
    let r = uniform(rng, &shape, -1.0, 1.0);
    let unary = |f: fn(&mut Graph, Var) -> Var, x: Tensor, r: Tensor| Case {
        inputs: vec![x],
        build: Box::new(move |g, v| {
            let y = f(g, v[0]);
            project(g, y, &r)
        }),
    };
    match op {
        "matmul" => {
            let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
            let r = uniform(rng, &[m, n], -1.0, 1.0);
            Case {
                inputs: vec![uniform(rng, &[m, k], -2.0, 2.0), uniform(rng, &[k, n], -2.0, 2.0)],
                build: Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1]).unwrap();
                    project(g, y, &r)
                }),
            }
        }
        "add_bias" => Case {
            inputs: vec![uniform(rng, &shape, -2.0, 2.0), uniform(rng, &[shape[1]], -2.0, 2.0)],
            build: Box::new(move |g, v| {
                let y = g.add_bias(v[0], v[1]).unwrap();
                project(g, y, &r)
            }),
        },
        "sigmoid" => unary(|g, x| g.sigmoid(x), uniform(rng, &shape, -5.0, 5.0), r),
        "square" => unary(|g, x| g.square(x), uniform(rng, &shape, -3.0, 3.0), r),
        "log" => unary(|g, x| g.log(x), uniform(rng, &shape, 0.2, 5.0), r),
        "exp" => unary(|g, x| g.exp(x), uniform(rng, &shape, -3.0, 3.0), r),
        "softplus" => unary(|g, x| g.softplus(x), uniform(rng, &shape, -20.0, 20.0), r),
        "scale" => {
            let c = rng.random_range(-3.0..3.0);
            Case {
                inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
                build: Box::new(move |g, v| {
                    let y = g.scale(v[0], c);
                    project(g, y, &r)
                }),
            }
        }
        "sum" => Case {
            inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
            build: Box::new(|g, v| g.sum(v[0])),
        },
        "mean" => Case {
            inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
            build: Box::new(|g, v| g.mean(v[0])),
        },
        "reshape" => {
            let flat = vec![shape[0] * shape[1]];
            let rf = uniform(rng, &flat, -1.0, 1.0);
            Case {
                inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
                build: Box::new(move |g, v| {
                    let y = g.reshape(v[0], &flat).unwrap();
                    project(g, y, &rf)
                }),
            }
        }
        "add" | "sub" | "mul" => {
            let which = op.to_string();
            Case {
                inputs: vec![uniform(rng, &shape, -2.0, 2.0), uniform(rng, &shape, -2.0, 2.0)],
                build: Box::new(move |g, v| {
                    let y = match which.as_str() {
                        "add" => g.add(v[0], v[1]),
                        "sub" => g.sub(v[0], v[1]),
                        _ => g.mul(v[0], v[1]),
                    }
                    .unwrap();
                    project(g, y, &r)
                }),
            }
        }
        "conv2d" => {
            let (b, ci, co) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
            let (kh, kw) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let (h, w) = (kh + dims(rng, 0, 3), kw + dims(rng, 0, 3));
            let r = uniform(rng, &[b, co, h - kh + 1, w - kw + 1], -1.0, 1.0);
            Case {
                inputs: vec![
                    uniform(rng, &[b, ci, h, w], -1.0, 1.0),
                    uniform(rng, &[co, ci, kh, kw], -1.0, 1.0),
                    uniform(rng, &[co], -1.0, 1.0),
                ],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2]).unwrap();
                    project(g, y, &r)
                }),
            }
        }
        "avg_pool2d" => {
            let (b, c) = (dims(rng, 1, 2), dims(rng, 1, 3));
            let (kh, kw) = (dims(rng, 1, 3), dims(rng, 1, 2));
            let (h, w) = (kh * dims(rng, 1, 3) + dims(rng, 0, kh - 1), kw * dims(rng, 1, 3));
            let r = uniform(rng, &[b, c, h / kh, w / kw], -1.0, 1.0);
            Case {
                inputs: vec![uniform(rng, &[b, c, h, w], -2.0, 2.0)],
                build: Box::new(move |g, v| {
                    let y = g.avg_pool2d(v[0], kh, kw).unwrap();
                    project(g, y, &r)
                }),
            }
        }
        "huber" => {
            let n = dims(rng, 1, 8);
            let delta = rng.random_range(0.5..3.0);
            // Keep every residual at least 0.05 away from the kink at |r| = delta.
            let mut pred = Vec::new();
            let mut target = Vec::new();
            for _ in 0..n {
                let t: f64 = rng.random_range(-3.0..3.0);
                let mut r: f64 = rng.random_range(-2.0 * delta..2.0 * delta);
                if (r.abs() - delta).abs() < 0.05 {
                    r += 0.1_f64.copysign(r);
                }
                pred.push(t + r);
                target.push(t);
            }
            Case {
                inputs: vec![Tensor::vector(pred), Tensor::vector(target)],
                build: Box::new(move |g, v| g.huber(v[0], v[1], delta).unwrap()),
            }
        }
        "gaussian_log_pdf" => {
            let broadcast = rng.random_bool(0.5);
            let ps: Vec<usize> = if broadcast { vec![1] } else { shape.clone() };
            Case {
                inputs: vec![
                    uniform(rng, &shape, -2.0, 2.0),
                    uniform(rng, &ps, -1.0, 1.0),
                    uniform(rng, &ps, 0.3, 2.0),
                ],
                build: Box::new(|g, v| g.gaussian_log_pdf(v[0], v[1], v[2]).unwrap()),
            }
        }
        other => panic!("no gradient case for {other}"),
    }
}

pub const OPERATORS: [&str; 18] = [
    "matmul",
    "add_bias",
    "sigmoid",
    "conv2d",
    "avg_pool2d",
    "reshape",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "square",
    "log",
    "exp",
    "softplus",
    "huber",
    "gaussian_log_pdf",
];

/// Worst relative error over `instances` random cases of `op`.
pub fn operator_suite(op: &str, instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..instances)
        .map(|_| max_grad_error(&operator_case(op, &mut r), None, FD_STEP))
        .fold(0.0, f64::max)
}

/// Huber loss of a full network on a random 5-sample batch, as a function of
/// all its parameter blocks.
pub fn network_case(kind: ModelKind, rng: &mut Rng64) -> (Case, Vec<(usize, usize)>) {
    let (t, f) = match kind {
        ModelKind::Dense3 => (3, 2),
        ModelKind::Conv2Pool2 => (10, 14),
    };
    let net = Network::new(ModelSpec::new(kind, t, f)).unwrap();
    let params = kaiming_uniform(net.layout(), rng);
    let x = uniform(rng, &[5, t, f], -1.0, 1.0);
    let y = uniform(rng, &[5], -2.0, 2.0);
    let blocks: Vec<Tensor> = params.unflatten().into_iter().map(|(_, t)| t).collect();
    // A few coordinates from every block.
    let mut coords = Vec::new();
    for (k, b) in blocks.iter().enumerate() {
        for _ in 0..4 {
            coords.push((k, rng.random_range(0..b.len())));
        }
    }
    let build: Builder = Box::new(move |g, v| {
        let input = g.constant(x.clone());
        let target = g.constant(y.clone());
        let pred = net
            .build(g, v, input, None::<&mut Dropout<'_, StreamRng>>)
            .unwrap();
        g.huber(pred, target, 100.0).unwrap()
    });
    (Case { inputs: blocks, build }, coords)
}

pub fn network_suite(kind: ModelKind, instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..instances)
        .map(|_| {
            let (case, coords) = network_case(kind, &mut r);
            max_grad_error(&case, Some(&coords), FD_STEP)
        })
        .fold(0.0, f64::max)
}

/// Keep `param_nodes` in the public surface exercised by the tests.
pub fn nodes_for(g: &mut Graph, net: &Network, rng: &mut Rng64) -> Vec<Var> {
    let p = kaiming_uniform(net.layout(), rng);
    param_nodes(g, &p, true)
}

pub fn synthetic_subset(dir: &Path, name: SubsetName, spec: &SyntheticSpec) {
    write_subset(dir, name, spec).unwrap();
}
