#![allow(dead_code)]

use bbtrain_core::hybridnet::{loss, Activation, Dense, HybridNode, Layer, SurrogateInit};
use bbtrain_core::numlin::{Matrix, RngStream};
use bbtrain_core::photonics::{BlackBoxLayer, LayerKind};
use bbtrain_core::surrogate::init_oracle;
use bbtrain_core::{Network, TrainConfig};

pub fn train_config(eta_bb: f64, m_bb: usize, m_sm: usize, rank: usize, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        eta: 0.05,
        eta_bb,
        mu: 1e-2,
        m_bb,
        m_sm,
        rank,
        batch,
        steps: 100,
        seed,
        init: SurrogateInit::Oracle,
        oversample: 5,
        sketch_probes: None,
        eval_every: 0,
        share_directions: true,
        sm_error_every: 0,
        record_wall_time: false,
        scale_init: None,
    }
}

/// Visits every trainable digital scalar in layer order. Frozen weights
/// and black-box parameters are skipped.
pub fn visit_params(net: &mut Network, mut f: impl FnMut(&mut f64)) {
    for layer in net.layers_mut() {
        match layer {
            Layer::Dense(d) if !d.frozen => {
                d.weight.as_mut_slice().iter_mut().for_each(&mut f);
                if let Some(b) = d.bias.as_mut() {
                    b.iter_mut().for_each(&mut f);
                }
            }
            Layer::Scale(s, _) => f(s),
            Layer::Hybrid(node) => f(&mut node.scale),
            _ => {}
        }
    }
}

pub fn digital_params(net: &mut Network) -> Vec<f64> {
    let mut out = Vec::new();
    visit_params(net, |p| out.push(*p));
    out
}

pub fn set_param(net: &mut Network, index: usize, value: f64) {
    let mut k = 0;
    visit_params(net, |p| {
        if k == index {
            *p = value;
        }
        k += 1;
    });
}

/// Flattens analytic gradients in the same order as [`visit_params`].
pub fn flat_grads(net: &mut Network, x: &Matrix, labels: &[usize]) -> Vec<f64> {
    use bbtrain_core::hybridnet::LayerGrad;
    let logits = net.forward(x).unwrap();
    let grads = net.backward(&logits, labels).unwrap();
    let mut out = Vec::new();
    for g in &grads.layers {
        match g {
            LayerGrad::Dense { weight, bias } => {
                out.extend_from_slice(weight.as_slice());
                if let Some(b) = bias {
                    out.extend_from_slice(b);
                }
            }
            LayerGrad::Scale(s) => out.push(*s),
            LayerGrad::Hybrid { scale, .. } => out.push(*scale),
            LayerGrad::None => {}
        }
    }
    out
}

/// Sign pattern of every ReLU input over the batch.
fn relu_pattern(net: &Network, x: &Matrix) -> Vec<bool> {
    let layers = net.layers();
    let mut out = Vec::new();
    for (k, l) in layers.iter().enumerate() {
        if let Layer::Activation(Activation::Relu, _) = l {
            let h = Network::new(layers[..k].to_vec()).predict(x).unwrap();
            out.extend(h.as_slice().iter().map(|&v| v > 0.0));
        }
    }
    out
}

/// Largest relative deviation between analytic gradients and a five-point
/// central difference. Entries where both are below `floor` are compared
/// absolutely. When a ReLU changes state inside the stencil the step is
/// shrunk until it does not.
pub fn fd_check(net: &mut Network, x: &Matrix, labels: &[usize], h: f64, floor: f64) -> f64 {
    let analytic = flat_grads(net, x, labels);
    let params = digital_params(net);
    assert_eq!(analytic.len(), params.len());
    let base = relu_pattern(net, x);
    let mut worst: f64 = 0.0;
    for (i, (&p, &a)) in params.iter().zip(&analytic).enumerate() {
        let mut step = h;
        loop {
            let smooth = [-2.0, 2.0].iter().all(|&t| {
                set_param(net, i, p + t * step);
                relu_pattern(net, x) == base
            });
            if smooth || step < 1e-9 {
                break;
            }
            step /= 10.0;
        }
        let mut at = |t: f64| {
            set_param(net, i, p + t);
            loss(&net.predict(x).unwrap(), labels).unwrap()
        };
        let d1 = at(step) - at(-step);
        let d2 = at(2.0 * step) - at(-2.0 * step);
        set_param(net, i, p);
        let fd = (8.0 * d1 - d2) / (12.0 * step);
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
    }
    worst
}

pub fn mlp(widths: &[usize], act: Activation, seed: u64) -> Network {
    let mut s = RngStream::new(seed, "init");
    let mut layers = Vec::new();
    for (k, w) in widths.windows(2).enumerate() {
        if k > 0 {
            layers.push(Layer::Activation(act, None));
        }
        let mut d = Dense::init(w[0], w[1], true, &mut s);
        if let Some(b) = d.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = 0.1 * s.normal());
        }
        layers.push(Layer::Dense(d));
    }
    Network::new(layers)
}

/// A 2-h-BB(h×h)-2 network with a full-rank exact surrogate, and its
/// digital counterpart where the black box is a frozen bias-free dense layer
/// followed by a trainable gain.
pub fn twin_pair(h: usize, scale: f64, seed: u64) -> (Network, Network) {
    let mut s = RngStream::new(seed, "init");
    let first = Dense::init(2, h, true, &mut s);
    let last = Dense::init(h, 2, true, &mut s);
    let mut bb = BlackBoxLayer::new(LayerKind::Matvec, h, h).unwrap();
    bb.init_params(&mut RngStream::new(seed, "bb-init/0"));
    let a = bb.materialize().unwrap();
    let sm = init_oracle(&bb, h).unwrap();
    let hybrid = Network::new(vec![
        Layer::Dense(first.clone()),
        Layer::Activation(Activation::Gelu, None),
        Layer::Hybrid(HybridNode::new(bb, sm, scale).unwrap()),
        Layer::Activation(Activation::Gelu, None),
        Layer::Dense(last.clone()),
    ]);
    let digital = Network::new(vec![
        Layer::Dense(first),
        Layer::Activation(Activation::Gelu, None),
        Layer::Dense(Dense::new(a, None).frozen()),
        Layer::Scale(scale, None),
        Layer::Activation(Activation::Gelu, None),
        Layer::Dense(last),
    ]);
    (hybrid, digital)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
