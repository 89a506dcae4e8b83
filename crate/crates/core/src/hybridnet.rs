//! A small MLP with explicit backprop and hybrid black-box nodes.
//!
//! A [`HybridNode`] evaluates its black-box layer for real on the forward
//! pass and routes gradients backwards through its surrogate. Its output is
//! `s · f(x)` with a trainable scalar `s` whose gradient is exact because it
//! only needs the cached raw output.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Tensor;
use crate::error::{Error, Result};
use crate::numlin::{Matrix, RngStream};
use crate::photonics::{BlackBoxLayer, LayerKind};
use crate::surrogate::{init_oracle, init_sketch, ProbeMode, SurrogateModel};

/// One entry of a network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inp: usize,
        out: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
    Gelu,
    /// Black-box linear layer; its physical model comes from the run's layer block.
    Blackbox { inp: usize, out: usize },
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks that widths chain; returns `(input width, output width)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let mut width: Option<usize> = None;
        let mut input = None;
        for (i, l) in self.layers.iter().enumerate() {
            if let LayerSpec::Dense { inp, out, .. } | LayerSpec::Blackbox { inp, out } = l {
                if *inp == 0 || *out == 0 {
                    return Err(Error::Config(format!("network layer {i}: zero width")));
                }
                if let Some(w) = width {
                    if w != *inp {
                        return Err(Error::Config(format!(
                            "network layer {i}: expects width {inp} but receives {w}"
                        )));
                    }
                } else {
                    input = Some(*inp);
                }
                width = Some(*out);
            }
        }
        match (input, width) {
            (Some(i), Some(o)) => Ok((i, o)),
            _ => Err(Error::Config("network has no dense or blackbox layer".into())),
        }
    }

    pub fn blackbox_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Blackbox { .. }))
            .count()
    }

    /// Same network with every black-box layer replaced by a dense one.
    pub fn digital_twin(&self) -> NetworkSpec {
        NetworkSpec {
            layers: self
                .layers
                .iter()
                .map(|l| match *l {
                    LayerSpec::Blackbox { inp, out } => LayerSpec::Dense { inp, out, bias: true },
                    ref other => other.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateInit {
    /// Full reconstruction plus truncated SVD.
    Oracle,
    /// Randomized range finder with stochastic transpose probes.
    Sketch,
}

/// How black-box nodes are built.
#[derive(Clone, Debug)]
pub struct HybridSetup {
    pub kind: LayerKind,
    pub rank: usize,
    pub init: SurrogateInit,
    pub oversample: usize,
    pub sketch_probes: usize,
    /// Initial output scale; `None` picks a per-kind default.
    pub scale_init: Option<f64>,
}

/// Default output scale: microring banks have a large positive mean
/// response, so their raw outputs grow with `d_inp`.
pub fn default_scale(kind: LayerKind, d_inp: usize) -> f64 {
    match kind {
        LayerKind::Mrr { .. } => 1.0 / d_inp as f64,
        _ => 1.0,
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
    pub frozen: bool,
    cache: Option<Matrix>,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Self {
        if let Some(b) = &bias {
            assert_eq!(b.len(), weight.rows());
        }
        Self {
            weight,
            bias,
            frozen: false,
            cache: None,
        }
    }

    /// Weights `N(0, 1/fan_in)`, zero bias.
    pub fn init(inp: usize, out: usize, bias: bool, stream: &mut RngStream) -> Self {
        let std = 1.0 / (inp as f64).sqrt();
        let w: Vec<f64> = stream.normal_vec(inp * out).into_iter().map(|x| x * std).collect();
        Self::new(Matrix::from_vec(out, inp, w), bias.then(|| vec![0.0; out]))
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_t(&self.weight);
        if let Some(b) = &self.bias {
            for i in 0..y.rows() {
                for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
        }
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct HybridCache {
    input: Matrix,
    raw: Matrix,
}

#[derive(Clone, Debug)]
pub struct HybridNode {
    pub layer: BlackBoxLayer,
    pub sm: SurrogateModel,
    pub scale: f64,
    cache: Option<HybridCache>,
}

impl HybridNode {
    pub fn new(layer: BlackBoxLayer, sm: SurrogateModel, scale: f64) -> Result<Self> {
        if sm.d_inp() != layer.d_inp() || sm.d_out() != layer.d_out() {
            return Err(Error::Dimension(format!(
                "surrogate {}->{} does not fit layer {}->{}",
                sm.d_inp(),
                sm.d_out(),
                layer.d_inp(),
                layer.d_out()
            )));
        }
        Ok(Self {
            layer,
            sm,
            scale,
            cache: None,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Activation(Activation, Option<Matrix>),
    /// Trainable scalar gain.
    Scale(f64, Option<Matrix>),
    Hybrid(HybridNode),
}

/// Gradient of one layer.
#[derive(Clone, Debug)]
pub enum LayerGrad {
    None,
    Dense { weight: Matrix, bias: Option<Vec<f64>> },
    Scale(f64),
    /// `error` is `∂L/∂y_raw` per batch row; `input` the rows that were queried.
    Hybrid { scale: f64, error: Matrix, input: Matrix },
}

#[derive(Clone, Debug)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
    /// Gradient with respect to the network input.
    pub input: Matrix,
}

#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Digital network from a spec; black-box entries are rejected.
    pub fn digital(spec: &NetworkSpec, init: &mut RngStream) -> Result<Self> {
        Self::build(spec, init, |_, _, _| {
            Err(Error::Config("digital network spec contains a blackbox layer".into()))
        })
    }

    /// Builds every layer in order. Dense weights come from `init`; black-box
    /// nodes get parameters from `bb-init/<k>` and their surrogate from
    /// `sm-init/<k>` under the same master seed.
    pub fn hybrid(spec: &NetworkSpec, setup: &HybridSetup, init: &mut RngStream) -> Result<Self> {
        let seed = init.master_seed();
        Self::build(spec, init, |k, inp, out| {
            let mut layer = BlackBoxLayer::new(setup.kind, inp, out)?;
            layer.init_params(&mut RngStream::new(seed, format!("bb-init/{k}")));
            let sm = match setup.init {
                SurrogateInit::Oracle => init_oracle(&layer, setup.rank)?,
                SurrogateInit::Sketch => init_sketch(
                    &layer,
                    setup.rank,
                    setup.oversample,
                    ProbeMode::Stochastic(setup.sketch_probes),
                    &mut RngStream::new(seed, format!("sm-init/{k}")),
                )?,
            };
            let scale = setup.scale_init.unwrap_or_else(|| default_scale(setup.kind, inp));
            HybridNode::new(layer, sm, scale)
        })
    }

    fn build(
        spec: &NetworkSpec,
        init: &mut RngStream,
        mut blackbox: impl FnMut(usize, usize, usize) -> Result<HybridNode>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut k = 0;
        for l in &spec.layers {
            layers.push(match *l {
                LayerSpec::Dense { inp, out, bias } => Layer::Dense(Dense::init(inp, out, bias, init)),
                LayerSpec::Relu => Layer::Activation(Activation::Relu, None),
                LayerSpec::Gelu => Layer::Activation(Activation::Gelu, None),
                LayerSpec::Blackbox { inp, out } => {
                    let node = blackbox(k, inp, out)?;
                    k += 1;
                    Layer::Hybrid(node)
                }
            });
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn hybrid_nodes(&self) -> impl Iterator<Item = &HybridNode> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Hybrid(h) => Some(h),
            _ => None,
        })
    }

    pub fn hybrid_nodes_mut(&mut self) -> impl Iterator<Item = &mut HybridNode> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Hybrid(h) => Some(h),
            _ => None,
        })
    }

    /// Total oracle queries across all black-box nodes.
    pub fn query_count(&self) -> u64 {
        self.hybrid_nodes().map(|h| h.layer.query_count()).sum()
    }

    /// Number of digitally trained scalars.
    pub fn digital_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) if !d.frozen => d.weight.as_slice().len() + d.bias.as_ref().map_or(0, Vec::len),
                Layer::Scale(..) | Layer::Hybrid(_) => 1,
                _ => 0,
            })
            .sum()
    }

    /// Forward pass keeping activations for [`backward`](Self::backward).
    /// Hybrid nodes query their layer once per row.
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dense(d) => {
                    check_width(h.cols(), d.weight.cols())?;
                    let y = d.apply(&h);
                    d.cache = Some(h);
                    y
                }
                Layer::Activation(a, cache) => {
                    let y = map(&h, |v| a.value(v));
                    *cache = Some(h);
                    y
                }
                Layer::Scale(s, cache) => {
                    let y = h.scaled(*s);
                    *cache = Some(h);
                    y
                }
                Layer::Hybrid(node) => {
                    let raw = node.layer.programmed().apply_rows(&h)?;
                    let y = raw.scaled(node.scale);
                    node.cache = Some(HybridCache { input: h, raw });
                    y
                }
            };
        }
        Ok(h)
    }

    /// Forward pass without caching (evaluation).
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => {
                    check_width(h.cols(), d.weight.cols())?;
                    d.apply(&h)
                }
                Layer::Activation(a, _) => map(&h, |v| a.value(v)),
                Layer::Scale(s, _) => h.scaled(*s),
                Layer::Hybrid(node) => node.layer.programmed().apply_rows(&h)?.scaled(node.scale),
            };
        }
        Ok(h)
    }

    /// Softmax cross-entropy backward from the logits of the last forward.
    pub fn backward(&mut self, logits: &Matrix, labels: &[usize]) -> Result<GradientSet> {
        let (_, dlogits) = loss_and_grad(logits, labels)?;
        self.backward_from(dlogits)
    }

    /// Propagates `∂L/∂output` through the cached activations. Black-box
    /// nodes use their surrogate; no oracle queries are made. Caches are
    /// consumed, so a second call without a new forward fails.
    pub fn backward_from(&mut self, upstream: Matrix) -> Result<GradientSet> {
        let mut g = upstream;
        let mut grads = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter_mut().rev() {
            let (next, grad) = match layer {
                Layer::Dense(d) => {
                    let x = d.cache.take().ok_or(Error::StaleCache)?;
                    let dx = g.matmul(&d.weight);
                    let grad = if d.frozen {
                        LayerGrad::None
                    } else {
                        let weight = g.t_matmul(&x);
                        let bias = d.bias.as_ref().map(|_| column_sums(&g));
                        LayerGrad::Dense { weight, bias }
                    };
                    (dx, grad)
                }
                Layer::Activation(a, cache) => {
                    let x = cache.take().ok_or(Error::StaleCache)?;
                    let mut dx = g;
                    for (d, xi) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *d *= a.derivative(*xi);
                    }
                    (dx, LayerGrad::None)
                }
                Layer::Scale(s, cache) => {
                    let x = cache.take().ok_or(Error::StaleCache)?;
                    let ds = crate::numlin::dot(g.as_slice(), x.as_slice());
                    (g.scaled(*s), LayerGrad::Scale(ds))
                }
                Layer::Hybrid(node) => {
                    let HybridCache { input, raw } = node.cache.take().ok_or(Error::StaleCache)?;
                    let ds = crate::numlin::dot(g.as_slice(), raw.as_slice());
                    let error = g.scaled(node.scale);
                    let dx = node.sm.backward_rows(&error)?;
                    (dx, LayerGrad::Hybrid { scale: ds, error, input })
                }
            };
            g = next;
            grads.push(grad);
        }
        grads.reverse();
        Ok(GradientSet { layers: grads, input: g })
    }

    /// `θ ← θ − η·∇θ` for every digitally trained parameter, including the
    /// hybrid output scales. Black-box parameters are untouched.
    pub fn sgd_step(&mut self, grads: &GradientSet, eta: f64) {
        assert_eq!(grads.layers.len(), self.layers.len());
        for (layer, grad) in self.layers.iter_mut().zip(&grads.layers) {
            match (layer, grad) {
                (Layer::Dense(d), LayerGrad::Dense { weight, bias }) => {
                    d.weight.axpy_assign(-eta, weight);
                    if let (Some(b), Some(gb)) = (d.bias.as_mut(), bias) {
                        crate::numlin::axpy(-eta, gb, b);
                    }
                }
                (Layer::Scale(s, _), LayerGrad::Scale(ds)) => *s -= eta * ds,
                (Layer::Hybrid(node), LayerGrad::Hybrid { scale, .. }) => node.scale -= eta * scale,
                _ => {}
            }
        }
    }

    /// Every parameter as a named tensor, in layer order.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.push(Tensor::matrix(format!("layers.{i}.weight"), &d.weight));
                    if let Some(b) = &d.bias {
                        out.push(Tensor::vector(format!("layers.{i}.bias"), b.clone()));
                    }
                }
                Layer::Activation(..) => {}
                Layer::Scale(s, _) => out.push(Tensor::scalar(format!("layers.{i}.scale"), *s)),
                Layer::Hybrid(node) => {
                    out.push(Tensor::scalar(format!("layers.{i}.scale"), node.scale));
                    out.push(Tensor::vector(format!("layers.{i}.bb.w"), node.layer.params().to_vec()));
                    out.push(Tensor::matrix(format!("layers.{i}.sm.u"), node.sm.u()));
                    out.push(Tensor::matrix(format!("layers.{i}.sm.s"), node.sm.s()));
                    out.push(Tensor::matrix(format!("layers.{i}.sm.v"), node.sm.v()));
                }
            }
        }
        out
    }

    /// Restores parameters written by [`tensors`](Self::tensors) into a
    /// network of the same architecture.
    pub fn load_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        let find = |name: String| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name:?}")))
        };
        let as_matrix = |t: &Tensor, shape: (usize, usize)| -> Result<Matrix> {
            if t.dims != [shape.0, shape.1] {
                return Err(Error::Dimension(format!(
                    "tensor {:?} has dims {:?}, expected {:?}",
                    t.name, t.dims, shape
                )));
            }
            Ok(Matrix::from_vec(shape.0, shape.1, t.data.clone()))
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    d.weight = as_matrix(find(format!("layers.{i}.weight"))?, d.weight.shape())?;
                    if let Some(b) = &mut d.bias {
                        let t = find(format!("layers.{i}.bias"))?;
                        if t.data.len() != b.len() {
                            return Err(Error::Dimension(format!("bias {i} length mismatch")));
                        }
                        b.copy_from_slice(&t.data);
                    }
                }
                Layer::Activation(..) => {}
                Layer::Scale(s, _) => *s = find(format!("layers.{i}.scale"))?.data[0],
                Layer::Hybrid(node) => {
                    node.scale = find(format!("layers.{i}.scale"))?.data[0];
                    node.layer.set_params(find(format!("layers.{i}.bb.w"))?.data.clone())?;
                    let r = node.sm.rank();
                    let u = as_matrix(find(format!("layers.{i}.sm.u"))?, (node.layer.d_out(), r))?;
                    let s = as_matrix(find(format!("layers.{i}.sm.s"))?, (r, r))?;
                    let v = as_matrix(find(format!("layers.{i}.sm.v"))?, (node.layer.d_inp(), r))?;
                    node.sm = SurrogateModel::from_factors(u, s, v)?;
                }
            }
        }
        Ok(())
    }
}

fn check_width(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("layer expects width {want}, got {got}")));
    }
    Ok(())
}

fn map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|&v| f(v)).collect())
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        crate::numlin::axpy(1.0, m.row(i), &mut out);
    }
    out
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Dimension(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean softmax cross-entropy.
pub fn loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_softmax_row(logits.row(i))[y])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Loss and `∂L/∂logits = (softmax − onehot)/b`.
pub fn loss_and_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let b = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let ls = log_softmax_row(logits.row(i));
        total -= ls[y];
        for (g, l) in grad.row_mut(i).iter_mut().zip(&ls) {
            *g = l.exp() / b;
        }
        grad[(i, y)] -= 1.0 / b;
    }
    Ok((total / b, grad))
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}
