//! The two regression architectures: Dense3 (D3) and Conv2Pool2 (C2P2).
//!
//! Both map a `T x F` window to one scalar RUL prediction through a linear
//! output neuron. Hidden activations are sigmoids; when dropout is active each
//! hidden activation is masked right after its sigmoid with inverted scaling.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamLayout, ParamRole, ParamVector, Tensor, Var};
use crate::error::{Error, Result};

pub const DENSE_WIDTH: usize = 100;
pub const CONV1_KERNEL: (usize, usize) = (5, 14);
pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_KERNEL: (usize, usize) = (2, 1);
pub const CONV2_CHANNELS: usize = 14;
pub const POOL: (usize, usize) = (2, 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "d3")]
    Dense3,
    #[serde(rename = "c2p2")]
    Conv2Pool2,
}

impl ModelKind {
    pub fn short_name(self) -> &'static str {
        match self {
            ModelKind::Dense3 => "d3",
            ModelKind::Conv2Pool2 => "c2p2",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d3" | "dense3" => Ok(ModelKind::Dense3),
            "c2p2" | "conv2pool2" => Ok(ModelKind::Conv2Pool2),
            other => Err(Error::Config(format!("unknown model '{other}' (expected d3 or c2p2)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub window: usize,
    pub features: usize,
    /// Drop probability used when dropout is active.
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, window: usize, features: usize) -> Self {
        ModelSpec {
            kind,
            window,
            features,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }
}

/// Parameter layout of Dense3 for a `window x features` input.
pub fn build_dense3(window: usize, features: usize) -> Result<ParamLayout> {
    if window == 0 || features == 0 {
        return Err(Error::Config(format!(
            "dense3 needs T, F >= 1 (got T={window}, F={features})"
        )));
    }
    let input = window * features;
    Ok(ParamLayout::new([
        ("dense1.weight", vec![input, DENSE_WIDTH], ParamRole::Weight { fan_in: input }),
        ("dense1.bias", vec![DENSE_WIDTH], ParamRole::Bias),
        ("dense2.weight", vec![DENSE_WIDTH, DENSE_WIDTH], ParamRole::Weight { fan_in: DENSE_WIDTH }),
        ("dense2.bias", vec![DENSE_WIDTH], ParamRole::Bias),
        ("dense3.weight", vec![DENSE_WIDTH, DENSE_WIDTH], ParamRole::Weight { fan_in: DENSE_WIDTH }),
        ("dense3.bias", vec![DENSE_WIDTH], ParamRole::Bias),
        ("out.weight", vec![DENSE_WIDTH, 1], ParamRole::Weight { fan_in: DENSE_WIDTH }),
        ("out.bias", vec![1], ParamRole::Bias),
    ]))
}

/// Spatial extents through the Conv2Pool2 stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShapes {
    /// Time extent at input, after conv1, pool1, conv2 and pool2.
    pub time: [usize; 5],
    /// Feature width after conv1 (unchanged by the `k x 1` stages).
    pub width: usize,
    /// Length of the flattened feature vector fed to the output neuron.
    pub flatten: usize,
}

pub fn conv2pool2_shapes(window: usize, features: usize) -> Result<ConvShapes> {
    let stage_err = |stage: &str, extent: &str| {
        Error::Config(format!(
            "conv2pool2 with T={window}, F={features}: {extent} extent drops below 1 at {stage}"
        ))
    };
    let valid = |n: usize, k: usize| n.checked_sub(k - 1).filter(|&v| v >= 1);
    let width = valid(features, CONV1_KERNEL.1).ok_or_else(|| stage_err("conv1", "feature"))?;
    let t1 = valid(window, CONV1_KERNEL.0).ok_or_else(|| stage_err("conv1", "time"))?;
    let t2 = Some(t1 / POOL.0).filter(|&v| v >= 1).ok_or_else(|| stage_err("pool1", "time"))?;
    let t3 = valid(t2, CONV2_KERNEL.0).ok_or_else(|| stage_err("conv2", "time"))?;
    let t4 = Some(t3 / POOL.0).filter(|&v| v >= 1).ok_or_else(|| stage_err("pool2", "time"))?;
    Ok(ConvShapes {
        time: [window, t1, t2, t3, t4],
        width,
        flatten: t4 * width * CONV2_CHANNELS,
    })
}

/// Parameter layout of Conv2Pool2 for a `window x features` input.
pub fn build_conv2pool2(window: usize, features: usize) -> Result<ParamLayout> {
    let shapes = conv2pool2_shapes(window, features)?;
    let (k1h, k1w) = CONV1_KERNEL;
    let (k2h, k2w) = CONV2_KERNEL;
    Ok(ParamLayout::new([
        ("conv1.weight", vec![CONV1_CHANNELS, 1, k1h, k1w], ParamRole::Weight { fan_in: k1h * k1w }),
        ("conv1.bias", vec![CONV1_CHANNELS], ParamRole::Bias),
        (
            "conv2.weight",
            vec![CONV2_CHANNELS, CONV1_CHANNELS, k2h, k2w],
            ParamRole::Weight { fan_in: CONV1_CHANNELS * k2h * k2w },
        ),
        ("conv2.bias", vec![CONV2_CHANNELS], ParamRole::Bias),
        ("out.weight", vec![shapes.flatten, 1], ParamRole::Weight { fan_in: shapes.flatten }),
        ("out.bias", vec![1], ParamRole::Bias),
    ]))
}

/// Inverted-dropout state threaded through a forward pass.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub p: f64,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> Dropout<'_, R> {
    fn mask(&mut self, shape: &[usize]) -> Tensor {
        let keep = 1.0 / (1.0 - self.p);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = if self.rng.random::<f64>() < self.p { 0.0 } else { keep };
        }
        t
    }
}

/// A network that can be appended to a [`Graph`].
///
/// Implementors map an input of shape `[B, T, F]` to predictions of shape `[B]`.
pub trait Architecture: Send + Sync {
    fn layout(&self) -> &Arc<ParamLayout>;

    /// `(T, F)` of a single input sample.
    fn input_shape(&self) -> (usize, usize);

    fn build<R: Rng + ?Sized>(
        &self,
        graph: &mut Graph,
        params: &[Var],
        input: Var,
        dropout: Option<&mut Dropout<'_, R>>,
    ) -> Result<Var>
    where
        Self: Sized;
}

/// One of the two architectures, bound to a concrete input size.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    layout: Arc<ParamLayout>,
}

impl Network {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {}",
                spec.dropout
            )));
        }
        let layout = match spec.kind {
            ModelKind::Dense3 => build_dense3(spec.window, spec.features)?,
            ModelKind::Conv2Pool2 => build_conv2pool2(spec.window, spec.features)?,
        };
        Ok(Network {
            spec,
            layout: Arc::new(layout),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

fn hidden<R: Rng + ?Sized>(
    g: &mut Graph,
    pre: Var,
    dropout: &mut Option<&mut Dropout<'_, R>>,
) -> Result<Var> {
    let h = g.sigmoid(pre);
    match dropout {
        Some(d) => {
            let mask = d.mask(g.shape(h));
            let m = g.constant(mask);
            g.mul(h, m)
        }
        None => Ok(h),
    }
}

impl Architecture for Network {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn input_shape(&self) -> (usize, usize) {
        (self.spec.window, self.spec.features)
    }

    fn build<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[Var],
        input: Var,
        mut dropout: Option<&mut Dropout<'_, R>>,
    ) -> Result<Var> {
        let (t, f) = self.input_shape();
        let s = g.shape(input).to_vec();
        if s.len() != 3 || s[1] != t || s[2] != f {
            return Err(Error::Shape {
                op: "model_input",
                lhs: vec![0, t, f],
                rhs: s,
            });
        }
        if params.len() != self.layout.entries().len() {
            return Err(Error::Usage(format!(
                "expected {} parameter nodes, got {}",
                self.layout.entries().len(),
                params.len()
            )));
        }
        let batch = s[0];
        let out = match self.spec.kind {
            ModelKind::Dense3 => {
                let mut x = g.reshape(input, &[batch, t * f])?;
                for layer in 0..3 {
                    let pre = Network::dense(g, x, params[2 * layer], params[2 * layer + 1])?;
                    x = hidden(g, pre, &mut dropout)?;
                }
                Network::dense(g, x, params[6], params[7])?
            }
            ModelKind::Conv2Pool2 => {
                let x = g.reshape(input, &[batch, 1, t, f])?;
                let c1 = g.conv2d(x, params[0], params[1])?;
                let h1 = hidden(g, c1, &mut dropout)?;
                let p1 = g.avg_pool2d(h1, POOL.0, POOL.1)?;
                let c2 = g.conv2d(p1, params[2], params[3])?;
                let h2 = hidden(g, c2, &mut dropout)?;
                let p2 = g.avg_pool2d(h2, POOL.0, POOL.1)?;
                let n: usize = g.shape(p2)[1..].iter().product();
                let flat = g.reshape(p2, &[batch, n])?;
                Network::dense(g, flat, params[4], params[5])?
            }
        };
        g.reshape(out, &[batch])
    }
}

/// Add every parameter block of `values` to `g`, as variables or constants.
pub fn param_nodes(g: &mut Graph, values: &ParamVector, trainable: bool) -> Vec<Var> {
    values
        .unflatten()
        .into_iter()
        .map(|(_, t)| if trainable { g.variable(t) } else { g.constant(t) })
        .collect()
}

/// Forward pass of `arch` with fixed parameters; one prediction per sample.
pub fn predict<A: Architecture, R: Rng + ?Sized>(
    arch: &A,
    params: &ParamVector,
    batch: &Tensor,
    dropout: Option<&mut Dropout<'_, R>>,
) -> Result<Vec<f64>> {
    if params.layout().as_ref() != arch.layout().as_ref() {
        return Err(Error::Usage("parameter layout does not match the architecture".into()));
    }
    let mut g = Graph::new();
    let nodes = param_nodes(&mut g, params, false);
    let input = g.constant(batch.clone());
    let out = arch.build(&mut g, &nodes, input, dropout)?;
    Ok(g.forward(out)?.data().to_vec())
}

/// Kaiming (He) uniform initialisation on fan-in for weights, zeros for biases.
pub fn kaiming_uniform<R: Rng + ?Sized>(layout: &Arc<ParamLayout>, rng: &mut R) -> ParamVector {
    let mut pv = ParamVector::zeros(Arc::clone(layout));
    for entry in layout.entries() {
        if let ParamRole::Weight { fan_in } = entry.role {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut pv.values_mut()[entry.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    pv
}

/// A network together with one parameter realisation.
#[derive(Clone, Debug)]
pub struct ModelInstance {
    pub network: Network,
    pub params: ParamVector,
}

impl ModelInstance {
    pub fn new(network: Network, params: ParamVector) -> Result<Self> {
        if params.layout().as_ref() != network.layout().as_ref() {
            return Err(Error::Usage("parameter layout does not match the network".into()));
        }
        Ok(ModelInstance { network, params })
    }

    /// Predictions for a `[B, T, F]` batch. With `dropout_rng` the spec's drop
    /// probability is applied; without it the pass is deterministic.
    pub fn predict<R: Rng + ?Sized>(&self, batch: &Tensor, dropout_rng: Option<&mut R>) -> Result<Vec<f64>> {
        match dropout_rng {
            Some(rng) => {
                let mut d = Dropout {
                    p: self.network.spec().dropout,
                    rng,
                };
                predict(&self.network, &self.params, batch, Some(&mut d))
            }
            None => predict::<_, R>(&self.network, &self.params, batch, None),
        }
    }
}
