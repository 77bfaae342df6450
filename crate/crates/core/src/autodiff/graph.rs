//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order, so the node index doubles as an
//! evaluation schedule. Building a node only checks shapes; values are computed
//! by [`Graph::forward`], and adjoints by [`Graph::backward`].

use std::f64::consts::PI;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Sigmoid(Var),
    Conv2d { input: Var, weight: Var, bias: Var },
    AvgPool2d { input: Var, kh: usize, kw: usize },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    Huber { pred: Var, target: Var, delta: f64 },
    GaussianLogPdf { x: Var, mean: Var, std: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Sigmoid(_) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Softplus(_) => "softplus",
            Op::Huber { .. } => "huber",
            Op::GaussianLogPdf { .. } => "gaussian_log_pdf",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![a, b],
            Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Softplus(a) => vec![a],
            Op::AvgPool2d { input, .. } => vec![input],
            Op::Conv2d {
                input,
                weight,
                bias,
            } => vec![input, weight, bias],
            Op::Huber { pred, target, .. } => vec![pred, target],
            Op::GaussianLogPdf { x, mean, std } => vec![x, mean, std],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
    value: Option<Tensor>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, evaluated as `max(x, 0) + ln(1 + e^-|x|)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Huber penalty of a single residual.
pub fn huber(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_grad(residual: f64, delta: f64) -> f64 {
    if residual.abs() <= delta {
        residual
    } else {
        delta * residual.signum()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose adjoint is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant by [`Graph::backward`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: value.shape().to_vec(),
            requires_grad,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// Replace the value of a leaf. Derived values and adjoints are invalidated.
    pub fn set_value(&mut self, var: Var, value: Tensor) -> Result<()> {
        let node = &self.nodes[var.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Usage(format!(
                "set_value on non-leaf node {} ({})",
                var.0,
                node.op.name()
            )));
        }
        if node.shape != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                lhs: node.shape.clone(),
                rhs: value.shape().to_vec(),
            });
        }
        self.nodes[var.0].value = Some(value);
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.value = None;
            }
        }
        self.adjoints.clear();
        Ok(())
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    /// Value of a node, if it has been computed.
    pub fn value(&self, var: Var) -> Option<&Tensor> {
        self.nodes[var.0].value.as_ref()
    }

    /// Adjoint of a node after [`Graph::backward`]; `None` for nodes that do not
    /// depend on any variable leaf.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(|a| a.as_ref())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn same_shape(&mut self, op: Op, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op.name(), a, b));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape))
    }

    fn unary(&mut self, op: Op, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        self.push(op, shape)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let shape = sx.to_vec();
        Ok(self.push(Op::AddBias(x, bias), shape))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid(x), x)
    }

    /// Valid (unpadded), stride-1 multi-channel 2-D cross-correlation.
    ///
    /// `input: [B, C_in, H, W]`, `weight: [C_out, C_in, KH, KW]`, `bias: [C_out]`
    /// produce `[B, C_out, H - KH + 1, W - KW + 1]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        let ok = si.len() == 4
            && sw.len() == 4
            && sb.len() == 1
            && si[1] == sw[1]
            && sb[0] == sw[0]
            && sw[2] <= si[2]
            && sw[3] <= si[3];
        if !ok {
            return Err(self.mismatch("conv2d", input, weight));
        }
        let shape = vec![si[0], sw[0], si[2] - sw[2] + 1, si[3] - sw[3] + 1];
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            shape,
        ))
    }

    /// Non-overlapping `kh x kw` average pooling over `[B, C, H, W]`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn avg_pool2d(&mut self, input: Var, kh: usize, kw: usize) -> Result<Var> {
        let si = self.shape(input);
        if si.len() != 4 || kh == 0 || kw == 0 || si[2] < kh || si[3] < kw {
            return Err(Error::Shape {
                op: "avg_pool2d",
                lhs: si.to_vec(),
                rhs: vec![kh, kw],
            });
        }
        let shape = vec![si[0], si[1], si[2] / kh, si[3] / kw];
        Ok(self.push(Op::AvgPool2d { input, kh, kw }, shape))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = self.shape(x).iter().product();
        if shape.iter().product::<usize>() != n || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(Op::Mul(a, b), a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(Op::Scale(x, factor), x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum(x), Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.push(Op::Mean(x), Vec::new())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Op::Square(x), x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log(x), x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp(x), x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Op::Softplus(x), x)
    }

    /// Sum of Huber penalties of `pred - target`.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(Error::Config(format!("huber delta must be > 0, got {delta}")));
        }
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch("huber", pred, target));
        }
        Ok(self.push(Op::Huber { pred, target, delta }, Vec::new()))
    }

    /// Log-density of `x` under a diagonal Gaussian, summed over elements.
    ///
    /// `mean` and `std` either match the shape of `x` or are single-element
    /// tensors broadcast over it.
    pub fn gaussian_log_pdf(&mut self, x: Var, mean: Var, std: Var) -> Result<Var> {
        for p in [mean, std] {
            let n: usize = self.shape(p).iter().product();
            if self.shape(p) != self.shape(x) && n != 1 {
                return Err(self.mismatch("gaussian_log_pdf", x, p));
            }
        }
        Ok(self.push(Op::GaussianLogPdf { x, mean, std }, Vec::new()))
    }

    fn val(&self, var: Var) -> &Tensor {
        self.nodes[var.0]
            .value
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    /// Evaluate every node up to and including `root`.
    pub fn forward(&mut self, root: Var) -> Result<&Tensor> {
        for i in 0..=root.0 {
            if self.nodes[i].value.is_some() {
                continue;
            }
            let value = self.eval(i)?;
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        Ok(self.val(root))
    }

    fn eval(&self, i: usize) -> Result<Tensor> {
        let node = &self.nodes[i];
        let shape = node.shape.clone();
        let out = match node.op {
            Op::Leaf => {
                return Err(Error::Usage(format!("leaf {i} has no value assigned")));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, va.data(), false, vb.data(), false, &mut c, 0.0);
                c
            }
            Op::AddBias(x, b) => {
                let (vx, vb) = (self.val(x), self.val(b));
                let n = vb.len();
                let mut out = vx.data().to_vec();
                for row in out.chunks_mut(n) {
                    for (o, bias) in row.iter_mut().zip(vb.data()) {
                        *o += bias;
                    }
                }
                out
            }
            Op::Sigmoid(x) => self.val(x).data().iter().map(|&v| sigmoid(v)).collect(),
            Op::Conv2d {
                input,
                weight,
                bias,
            } => conv2d_forward(self.val(input), self.val(weight), self.val(bias), &shape),
            Op::AvgPool2d { input, kh, kw } => avg_pool_forward(self.val(input), kh, kw, &shape),
            Op::Reshape(x) => self.val(x).data().to_vec(),
            Op::Add(a, b) => zip_map(self.val(a), self.val(b), |x, y| x + y),
            Op::Sub(a, b) => zip_map(self.val(a), self.val(b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(self.val(a), self.val(b), |x, y| x * y),
            Op::Scale(x, f) => self.val(x).data().iter().map(|v| v * f).collect(),
            Op::Sum(x) => vec![self.val(x).data().iter().sum()],
            Op::Mean(x) => {
                let v = self.val(x);
                vec![v.data().iter().sum::<f64>() / v.len() as f64]
            }
            Op::Square(x) => self.val(x).data().iter().map(|v| v * v).collect(),
            Op::Log(x) => self.val(x).data().iter().map(|v| v.ln()).collect(),
            Op::Exp(x) => self.val(x).data().iter().map(|v| v.exp()).collect(),
            Op::Softplus(x) => self.val(x).data().iter().map(|&v| softplus(v)).collect(),
            Op::Huber { pred, target, delta } => {
                let s = self
                    .val(pred)
                    .data()
                    .iter()
                    .zip(self.val(target).data())
                    .map(|(p, t)| huber(p - t, delta))
                    .sum();
                vec![s]
            }
            Op::GaussianLogPdf { x, mean, std } => {
                let (vx, vm, vs) = (self.val(x), self.val(mean), self.val(std));
                let half_log_2pi = 0.5 * (2.0 * PI).ln();
                let mut acc = 0.0;
                for (j, &xv) in vx.data().iter().enumerate() {
                    let m = broadcast_at(vm, j);
                    let s = broadcast_at(vs, j);
                    let z = (xv - m) / s;
                    acc += -half_log_2pi - s.ln() - 0.5 * z * z;
                }
                vec![acc]
            }
        };
        Ok(Tensor::new(shape, out).expect("operator output matches its inferred shape"))
    }

    /// Reverse sweep from a scalar `root`. Populates adjoints of every node on a
    /// path from a variable leaf to `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let Some(root_value) = self.nodes[root.0].value.as_ref() else {
            return Err(Error::Usage("backward called before forward".into()));
        };
        if !root_value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        self.adjoints = (0..self.nodes.len()).map(|_| None).collect();
        self.adjoints[root.0] = Some(Tensor::filled(&self.nodes[root.0].shape, 1.0));

        for i in (0..=root.0).rev() {
            let Some(adj) = self.adjoints[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &adj);
            }
            self.adjoints[i] = Some(adj);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, grad: Vec<f64>) {
        match &mut self.adjoints[v.0] {
            Some(a) => a.add_assign(&grad),
            slot @ None => {
                let shape = self.nodes[v.0].shape.clone();
                *slot = Some(Tensor::new(shape, grad).expect("gradient matches node shape"));
            }
        }
    }

    fn propagate(&mut self, i: usize, adj: &Tensor) {
        let g = adj.data();
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, vb.data(), true, &mut ga, 0.0);
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.val(a).data(), true, g, false, &mut gb, 0.0);
                    self.accumulate(b, gb);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(x) {
                    self.accumulate(x, g.to_vec());
                }
                if self.needs(b) {
                    let n = self.nodes[b.0].shape[0];
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.as_ref().expect("forward ran");
                let gx = y.data().iter().zip(g).map(|(s, gv)| gv * s * (1.0 - s)).collect();
                self.accumulate(x, gx);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let (gi, gw, gb) = conv2d_backward(
                    self.val(input),
                    self.val(weight),
                    adj,
                    self.needs(input),
                    self.needs(weight),
                );
                if let Some(gi) = gi {
                    self.accumulate(input, gi);
                }
                if let Some(gw) = gw {
                    self.accumulate(weight, gw);
                }
                if self.needs(bias) {
                    self.accumulate(bias, gb);
                }
            }
            Op::AvgPool2d { input, kh, kw } => {
                let gi = avg_pool_backward(&self.nodes[input.0].shape, adj, kh, kw);
                self.accumulate(input, gi);
            }
            Op::Reshape(x) => self.accumulate(x, g.to_vec()),
            Op::Add(a, b) => {
                if self.needs(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.needs(b) {
                    self.accumulate(b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.needs(b) {
                    self.accumulate(b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let ga = zip_map_raw(g, self.val(b).data(), |x, y| x * y);
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let gb = zip_map_raw(g, self.val(a).data(), |x, y| x * y);
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(x, f) => self.accumulate(x, g.iter().map(|v| v * f).collect()),
            Op::Sum(x) => {
                let n = self.val(x).len();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.val(x).len();
                self.accumulate(x, vec![g[0] / n as f64; n]);
            }
            Op::Square(x) => {
                let gx = zip_map_raw(g, self.val(x).data(), |gv, v| 2.0 * v * gv);
                self.accumulate(x, gx);
            }
            Op::Log(x) => {
                let gx = zip_map_raw(g, self.val(x).data(), |gv, v| gv / v);
                self.accumulate(x, gx);
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.as_ref().expect("forward ran");
                let gx = zip_map_raw(g, y.data(), |gv, e| gv * e);
                self.accumulate(x, gx);
            }
            Op::Softplus(x) => {
                let gx = zip_map_raw(g, self.val(x).data(), |gv, v| gv * sigmoid(v));
                self.accumulate(x, gx);
            }
            Op::Huber { pred, target, delta } => {
                let gp: Vec<f64> = self
                    .val(pred)
                    .data()
                    .iter()
                    .zip(self.val(target).data())
                    .map(|(p, t)| g[0] * huber_grad(p - t, delta))
                    .collect();
                if self.needs(target) {
                    self.accumulate(target, gp.iter().map(|v| -v).collect());
                }
                if self.needs(pred) {
                    self.accumulate(pred, gp);
                }
            }
            Op::GaussianLogPdf { x, mean, std } => {
                let (vx, vm, vs) = (self.val(x), self.val(mean), self.val(std));
                let n = vx.len();
                let mut gx = vec![0.0; n];
                let mut gm = vec![0.0; vm.len()];
                let mut gs = vec![0.0; vs.len()];
                for j in 0..n {
                    let xv = vx.data()[j];
                    let m = broadcast_at(vm, j);
                    let s = broadcast_at(vs, j);
                    let d = xv - m;
                    let inv_var = 1.0 / (s * s);
                    gx[j] = -g[0] * d * inv_var;
                    gm[if vm.len() == 1 { 0 } else { j }] += g[0] * d * inv_var;
                    gs[if vs.len() == 1 { 0 } else { j }] += g[0] * (d * d * inv_var - 1.0) / s;
                }
                if self.needs(x) {
                    self.accumulate(x, gx);
                }
                if self.needs(mean) {
                    self.accumulate(mean, gm);
                }
                if self.needs(std) {
                    self.accumulate(std, gs);
                }
            }
        }
    }
}

fn broadcast_at(t: &Tensor, j: usize) -> f64 {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[j]
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    zip_map_raw(a.data(), b.data(), f)
}

fn zip_map_raw(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Unfold one `[C, H, W]` image into `[C*KH*KW, HO*WO]` patch columns.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut cols = vec![0.0; c * kh * kw * ho * wo];
    let mut row = 0;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let src = &img[ci * h * w + (oi + ki) * w + kj..];
                    dst[oi * wo..(oi + 1) * wo].copy_from_slice(&src[..wo]);
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add(
    cols: &[f64],
    img: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut row = 0;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let base = ci * h * w + (oi + ki) * w + kj;
                    for (d, s) in img[base..base + wo].iter_mut().zip(&src[oi * wo..(oi + 1) * wo]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let (b, c, h, w) = dims4(input.shape());
    let (co, _, kh, kw) = dims4(weight.shape());
    let p = out_shape[2] * out_shape[3];
    let ck = c * kh * kw;
    let mut out = vec![0.0; b * co * p];
    for bi in 0..b {
        let img = &input.data()[bi * c * h * w..(bi + 1) * c * h * w];
        let cols = im2col(img, c, h, w, kh, kw);
        let dst = &mut out[bi * co * p..(bi + 1) * co * p];
        for (o, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        gemm(co, ck, p, weight.data(), false, &cols, false, dst, 1.0);
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>);

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    adj: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> ConvGrads {
    let (b, c, h, w) = dims4(input.shape());
    let (co, _, kh, kw) = dims4(weight.shape());
    let p = adj.shape()[2] * adj.shape()[3];
    let ck = c * kh * kw;
    let mut gi = need_input.then(|| vec![0.0; input.len()]);
    let mut gw = need_weight.then(|| vec![0.0; weight.len()]);
    let mut gb = vec![0.0; co];
    let mut dcols = vec![0.0; ck * p];
    for bi in 0..b {
        let g = &adj.data()[bi * co * p..(bi + 1) * co * p];
        for (o, chunk) in g.chunks(p).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
        let img = &input.data()[bi * c * h * w..(bi + 1) * c * h * w];
        if let Some(gw) = gw.as_mut() {
            let cols = im2col(img, c, h, w, kh, kw);
            gemm(co, p, ck, g, false, &cols, true, gw, 1.0);
        }
        if let Some(gi) = gi.as_mut() {
            gemm(ck, co, p, weight.data(), true, g, false, &mut dcols, 0.0);
            col2im_add(&dcols, &mut gi[bi * c * h * w..(bi + 1) * c * h * w], c, h, w, kh, kw);
        }
    }
    (gi, gw, gb)
}

fn avg_pool_forward(input: &Tensor, kh: usize, kw: usize, out_shape: &[usize]) -> Vec<f64> {
    let (b, c, h, w) = dims4(input.shape());
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let inv = 1.0 / (kh * kw) as f64;
    let x = input.data();
    let mut out = vec![0.0; b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let mut s = 0.0;
                for ki in 0..kh {
                    for kj in 0..kw {
                        s += src[(oi * kh + ki) * w + oj * kw + kj];
                    }
                }
                out[plane * ho * wo + oi * wo + oj] = s * inv;
            }
        }
    }
    out
}

fn avg_pool_backward(in_shape: &[usize], adj: &Tensor, kh: usize, kw: usize) -> Vec<f64> {
    let (b, c, h, w) = dims4(in_shape);
    let (ho, wo) = (adj.shape()[2], adj.shape()[3]);
    let inv = 1.0 / (kh * kw) as f64;
    let mut gi = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let gv = adj.data()[plane * ho * wo + oi * wo + oj] * inv;
                for ki in 0..kh {
                    for kj in 0..kw {
                        dst[(oi * kh + ki) * w + oj * kw + kj] += gv;
                    }
                }
            }
        }
    }
    gi
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}
