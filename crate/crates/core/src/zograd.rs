//! Gaussian-smoothing gradient estimates for black-box parameters.
//!
//! For an input `x` and an output error `v`, the target is the
//! gradient-vector product `(∂f(x)/∂w)ᵀ v`. Each sample perturbs the
//! parameters along `u ~ N(0, I)` and weights `u` by the directional
//! difference:
//!
//! ```text
//! g ≈ 1/(μ·M) · Σᵢ ⟨f[w + μuᵢ](x) − f[w](x), v⟩ · uᵢ
//! ```
//!
//! The unperturbed query `f[w](x)` is made once per input and shared by all
//! `M` samples, so one estimate costs `M + 1` queries per input vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numlin::{axpy, dot, Matrix, RngStream};
use crate::photonics::BlackBoxLayer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoConfig {
    pub mu: f64,
    pub m_bb: usize,
    pub share_directions: bool,
}

impl ZoConfig {
    pub fn new(mu: f64, m_bb: usize) -> Result<Self> {
        let cfg = Self {
            mu,
            m_bb,
            share_directions: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if self.m_bb == 0 {
            return Err(Error::Config("m_bb must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoEstimate {
    pub g: Vec<f64>,
    pub queries_used: u64,
    pub samples: usize,
}

/// Single-input estimate at parameters `w`.
pub fn estimate_gradient(
    layer: &BlackBoxLayer,
    w: &[f64],
    x: &[f64],
    v: &[f64],
    cfg: &ZoConfig,
    stream: &mut RngStream,
) -> Result<ZoEstimate> {
    let xs = Matrix::from_vec(1, x.len(), x.to_vec());
    let vs = Matrix::from_vec(1, v.len(), v.to_vec());
    estimate_batch(layer, w, &xs, &vs, cfg, stream)
}

/// Batch mean of per-input estimates. Rows of `xs` are inputs, rows of
/// `vs` the matching error vectors.
///
/// With `share_directions` the same `M` directions serve every input, so the
/// device is reprogrammed `M + 1` times per batch; otherwise each input draws
/// its own directions. Both cost `b·(M + 1)` queries.
pub fn estimate_batch(
    layer: &BlackBoxLayer,
    w: &[f64],
    xs: &Matrix,
    vs: &Matrix,
    cfg: &ZoConfig,
    stream: &mut RngStream,
) -> Result<ZoEstimate> {
    cfg.validate()?;
    let b = xs.rows();
    if b == 0 || vs.rows() != b {
        return Err(Error::Dimension(format!(
            "zo batch needs matching non-empty input/error batches, got {} and {}",
            b,
            vs.rows()
        )));
    }
    if xs.cols() != layer.d_inp() || vs.cols() != layer.d_out() {
        return Err(Error::Dimension(format!(
            "zo batch shapes {:?}/{:?} do not fit a {}->{} layer",
            xs.shape(),
            vs.shape(),
            layer.d_inp(),
            layer.d_out()
        )));
    }
    if w.len() != layer.d_bb() {
        return Err(Error::Dimension(format!(
            "zo parameters: expected {}, got {}",
            layer.d_bb(),
            w.len()
        )));
    }
    let m = cfg.m_bb;
    let d_bb = w.len();
    let start = layer.query_count();

    let base = layer.program(w)?.apply_rows(xs)?;
    let base_inner: Vec<f64> = (0..b).map(|i| dot(base.row(i), vs.row(i))).collect();

    let mut g = vec![0.0; d_bb];
    let mut u = vec![0.0; d_bb];
    let mut w_pert = vec![0.0; d_bb];
    let mut y = vec![0.0; layer.d_out()];

    if cfg.share_directions {
        for _ in 0..m {
            stream.fill_normal(&mut u);
            perturb(w, &u, cfg.mu, &mut w_pert);
            let device = layer.program(&w_pert)?;
            let mut coeff = 0.0;
            for i in 0..b {
                device.apply_into(xs.row(i), &mut y)?;
                coeff += dot(&y, vs.row(i)) - base_inner[i];
            }
            axpy(coeff, &u, &mut g);
        }
    } else {
        for i in 0..b {
            for _ in 0..m {
                stream.fill_normal(&mut u);
                perturb(w, &u, cfg.mu, &mut w_pert);
                layer.program(&w_pert)?.apply_into(xs.row(i), &mut y)?;
                axpy(dot(&y, vs.row(i)) - base_inner[i], &u, &mut g);
            }
        }
    }
    let norm = 1.0 / (cfg.mu * m as f64 * b as f64);
    g.iter_mut().for_each(|gi| *gi *= norm);

    Ok(ZoEstimate {
        g,
        queries_used: layer.query_count() - start,
        samples: m,
    })
}

fn perturb(w: &[f64], u: &[f64], mu: f64, out: &mut [f64]) {
    for ((o, wi), ui) in out.iter_mut().zip(w).zip(u) {
        *o = wi + mu * ui;
    }
}
