//! Simulated photonic layers exposed only as query oracles `x ↦ A(w)·x`.
//!
//! Every evaluation goes through [`BlackBoxLayer`], which counts queries.
//! The parameter-to-matrix map stays private to this module; training code
//! sees outputs, parameters and the query counter, nothing else.

pub mod mesh;
pub mod monarch;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numlin::{Matrix, RngStream};

pub use mesh::{mzi_block, transfer_matrix, BlockVariant, MeshLayout};
pub use monarch::{monarch_forward, MonarchShape};

/// Intrinsic amplitude transmission of the reference microring.
pub const MRR_A: f64 = 0.8;
/// Self-coupling coefficient of the reference microring.
pub const MRR_R: f64 = 0.9;

/// Widest layer [`BlackBoxLayer::materialize`] will reconstruct column by column.
pub const MATERIALIZE_LIMIT: usize = 4096;

/// Microring through-port response mapped to `[-1, 1]`.
pub fn mrr_func(w: f64, a: f64, r_c: f64) -> f64 {
    let c = 2.0 * a * r_c * w.cos();
    let num = a * a + r_c * r_c - c;
    let den = 1.0 + (a * r_c) * (a * r_c) - c;
    2.0 * (num / den).sqrt() - 1.0
}

/// `cos(w)/√d_inp` reshaped row-major to `d_out × d_inp`.
pub fn slm_matrix(w: &[f64], d_out: usize, d_inp: usize) -> Result<Matrix> {
    if w.len() != d_out * d_inp {
        return Err(Error::Dimension(format!(
            "slm phases: expected {}, got {}",
            d_out * d_inp,
            w.len()
        )));
    }
    let norm = 1.0 / (d_inp as f64).sqrt();
    Ok(Matrix::from_vec(
        d_out,
        d_inp,
        w.iter().map(|t| t.cos() * norm).collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindName {
    Matvec,
    Mrr,
    Slm,
    Monarch,
    Mzi,
    Mzi3,
}

impl KindName {
    pub const ALL: [KindName; 6] = [
        KindName::Matvec,
        KindName::Mrr,
        KindName::Slm,
        KindName::Monarch,
        KindName::Mzi,
        KindName::Mzi3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KindName::Matvec => "matvec",
            KindName::Mrr => "mrr",
            KindName::Slm => "slm",
            KindName::Monarch => "monarch",
            KindName::Mzi => "mzi",
            KindName::Mzi3 => "mzi3",
        }
    }
}

impl fmt::Display for KindName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KindName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        KindName::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer kind {s:?}")))
    }
}

/// Physical layer model with its device constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Matvec,
    Mrr { a: f64, r_c: f64 },
    Slm,
    Monarch,
    Mzi,
    Mzi3,
}

impl LayerKind {
    pub fn name(&self) -> KindName {
        match self {
            LayerKind::Matvec => KindName::Matvec,
            LayerKind::Mrr { .. } => KindName::Mrr,
            LayerKind::Slm => KindName::Slm,
            LayerKind::Monarch => KindName::Monarch,
            LayerKind::Mzi => KindName::Mzi,
            LayerKind::Mzi3 => KindName::Mzi3,
        }
    }

    /// Default constants for a kind name.
    pub fn from_name(name: KindName) -> Self {
        match name {
            KindName::Matvec => LayerKind::Matvec,
            KindName::Mrr => LayerKind::Mrr { a: MRR_A, r_c: MRR_R },
            KindName::Slm => LayerKind::Slm,
            KindName::Monarch => LayerKind::Monarch,
            KindName::Mzi => LayerKind::Mzi,
            KindName::Mzi3 => LayerKind::Mzi3,
        }
    }

    fn is_angular(&self) -> bool {
        !matches!(self, LayerKind::Matvec)
    }
}

#[derive(Clone, Debug)]
enum Geometry {
    Dense,
    Monarch(MonarchShape),
    Mesh(MeshLayout, BlockVariant),
}

impl Geometry {
    fn new(kind: LayerKind, d_inp: usize, d_out: usize) -> Result<Self> {
        Ok(match kind {
            LayerKind::Matvec | LayerKind::Mrr { .. } | LayerKind::Slm => Geometry::Dense,
            LayerKind::Monarch => Geometry::Monarch(MonarchShape::new(d_inp, d_out)?),
            LayerKind::Mzi => Geometry::Mesh(MeshLayout::clements(d_inp.max(d_out)), BlockVariant::Mzi),
            LayerKind::Mzi3 => Geometry::Mesh(MeshLayout::clements(d_inp.max(d_out)), BlockVariant::Mzi3),
        })
    }

    fn param_count(&self, d_inp: usize, d_out: usize) -> usize {
        match self {
            Geometry::Dense => d_inp * d_out,
            Geometry::Monarch(s) => s.param_count(),
            Geometry::Mesh(l, _) => l.param_count(),
        }
    }
}

/// Query-only linear layer `f(x) = A(w)·x`.
///
/// The forward oracle takes `&self`; the query counter is atomic so a
/// simulator may be shared read-only while parameters are fixed.
#[derive(Debug)]
pub struct BlackBoxLayer {
    kind: LayerKind,
    geometry: Geometry,
    d_inp: usize,
    d_out: usize,
    w: Vec<f64>,
    queries: AtomicU64,
    query_limit: Option<u64>,
}

impl Clone for BlackBoxLayer {
    fn clone(&self) -> Self {
        Self {
            kind: self.kind,
            geometry: self.geometry.clone(),
            d_inp: self.d_inp,
            d_out: self.d_out,
            w: self.w.clone(),
            queries: AtomicU64::new(self.query_count()),
            query_limit: self.query_limit,
        }
    }
}

impl BlackBoxLayer {
    /// New layer with all parameters zero.
    pub fn new(kind: LayerKind, d_inp: usize, d_out: usize) -> Result<Self> {
        if d_inp == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "layer dims must be positive, got {d_inp}->{d_out}"
            )));
        }
        if let LayerKind::Mrr { a, r_c } = kind {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&r_c) || a * r_c >= 1.0 {
                return Err(Error::Config(format!(
                    "mrr constants must lie in [0,1] with a·r_c < 1, got a={a}, r_c={r_c}"
                )));
            }
        }
        let geometry = Geometry::new(kind, d_inp, d_out)?;
        let d_bb = geometry.param_count(d_inp, d_out);
        Ok(Self {
            kind,
            geometry,
            d_inp,
            d_out,
            w: vec![0.0; d_bb],
            queries: AtomicU64::new(0),
            query_limit: None,
        })
    }

    pub fn with_params(mut self, w: Vec<f64>) -> Result<Self> {
        self.set_params(w)?;
        Ok(self)
    }

    /// Parameter count for a kind and shape without building a layer.
    pub fn param_count_for(kind: LayerKind, d_inp: usize, d_out: usize) -> Result<usize> {
        Ok(Geometry::new(kind, d_inp, d_out)?.param_count(d_inp, d_out))
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn d_inp(&self) -> usize {
        self.d_inp
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_bb(&self) -> usize {
        self.w.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.w
    }

    pub fn set_params(&mut self, w: Vec<f64>) -> Result<()> {
        self.check_params(&w)?;
        self.w = w;
        Ok(())
    }

    /// Draws fresh parameters: uniform on `[-π, π]` for phase-programmed
    /// kinds, `N(0, 1/d_inp)` entries for matvec.
    pub fn init_params(&mut self, stream: &mut RngStream) {
        if self.kind.is_angular() {
            for w in &mut self.w {
                *w = stream.uniform(-PI, PI);
            }
        } else {
            let std = 1.0 / (self.d_inp as f64).sqrt();
            for w in &mut self.w {
                *w = std * stream.normal();
            }
        }
    }

    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// Caps the lifetime query counter; queries past the cap fail.
    pub fn set_query_limit(&mut self, limit: Option<u64>) {
        self.query_limit = limit;
    }

    pub fn remaining_queries(&self) -> Option<u64> {
        self.query_limit
            .map(|l| l.saturating_sub(self.query_count()))
    }

    /// Fails unless `n` more queries fit in the budget.
    pub fn ensure_budget(&self, n: u64) -> Result<()> {
        match self.remaining_queries() {
            Some(remaining) if remaining < n => Err(Error::BudgetExhausted { needed: n, remaining }),
            _ => Ok(()),
        }
    }

    fn charge(&self, n: u64) -> Result<()> {
        let Some(limit) = self.query_limit else {
            self.queries.fetch_add(n, Ordering::Relaxed);
            return Ok(());
        };
        self.queries
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |used| {
                (used + n <= limit).then_some(used + n)
            })
            .map(|_| ())
            .map_err(|used| Error::BudgetExhausted {
                needed: n,
                remaining: limit.saturating_sub(used),
            })
    }

    fn check_params(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.d_bb() {
            return Err(Error::Dimension(format!(
                "{} layer expects {} parameters, got {}",
                self.kind.name(),
                self.d_bb(),
                w.len()
            )));
        }
        Ok(())
    }

    /// Configures the device at `w` without touching the stored parameters.
    pub fn program(&self, w: &[f64]) -> Result<Programmed<'_>> {
        self.check_params(w)?;
        let transfer = match &self.geometry {
            Geometry::Dense => {
                let m = match self.kind {
                    LayerKind::Matvec => Matrix::from_vec(self.d_out, self.d_inp, w.to_vec()),
                    LayerKind::Mrr { a, r_c } => Matrix::from_vec(
                        self.d_out,
                        self.d_inp,
                        w.iter().map(|&t| mrr_func(t, a, r_c)).collect(),
                    ),
                    LayerKind::Slm => slm_matrix(w, self.d_out, self.d_inp)?,
                    _ => unreachable!("dense geometry for non-dense kind"),
                };
                Transfer::Dense(m)
            }
            Geometry::Monarch(shape) => Transfer::Monarch(shape.compile(w)),
            Geometry::Mesh(layout, variant) => Transfer::Mesh(layout.compile(w, *variant)),
        };
        Ok(Programmed {
            layer: self,
            transfer,
        })
    }

    /// Device at the currently stored parameters.
    pub fn programmed(&self) -> Programmed<'_> {
        self.program(&self.w).expect("stored parameters always valid")
    }

    /// One oracle query at the stored parameters.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.programmed().apply(x)
    }

    /// One oracle query at explicit parameters.
    pub fn forward_at(&self, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.program(w)?.apply(x)
    }

    /// Reconstructs `A(w)` from `d_inp` unit-vector queries.
    pub fn materialize(&self) -> Result<Matrix> {
        self.materialize_at(&self.w)
    }

    pub fn materialize_at(&self, w: &[f64]) -> Result<Matrix> {
        if self.d_inp > MATERIALIZE_LIMIT {
            return Err(Error::MaterializeGuard {
                d_inp: self.d_inp,
                limit: MATERIALIZE_LIMIT,
            });
        }
        self.program(w)?.materialize()
    }
}

#[derive(Debug)]
enum Transfer {
    Dense(Matrix),
    Monarch(monarch::CompiledMonarch),
    Mesh(mesh::CompiledMesh),
}

/// A layer configured at a particular parameter vector. Each
/// [`apply`](Programmed::apply) is one counted oracle query.
#[derive(Debug)]
pub struct Programmed<'a> {
    layer: &'a BlackBoxLayer,
    transfer: Transfer,
}

impl Programmed<'_> {
    pub fn d_inp(&self) -> usize {
        self.layer.d_inp
    }

    pub fn d_out(&self) -> usize {
        self.layer.d_out
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.layer.d_out];
        self.apply_into(x, &mut y)?;
        Ok(y)
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.layer.d_inp || y.len() != self.layer.d_out {
            return Err(Error::Dimension(format!(
                "{} layer is {}->{}, got input {} / output {}",
                self.layer.kind.name(),
                self.layer.d_inp,
                self.layer.d_out,
                x.len(),
                y.len()
            )));
        }
        self.layer.charge(1)?;
        self.evaluate(x, y);
        Ok(())
    }

    /// Queries every row of `xs`; returns outputs row-wise.
    pub fn apply_rows(&self, xs: &Matrix) -> Result<Matrix> {
        if xs.cols() != self.layer.d_inp {
            return Err(Error::Dimension(format!(
                "batch width {} does not match d_inp {}",
                xs.cols(),
                self.layer.d_inp
            )));
        }
        self.layer.charge(xs.rows() as u64)?;
        let mut out = Matrix::zeros(xs.rows(), self.layer.d_out);
        for i in 0..xs.rows() {
            self.evaluate(xs.row(i), out.row_mut(i));
        }
        Ok(out)
    }

    fn materialize(&self) -> Result<Matrix> {
        let n = self.layer.d_inp;
        self.layer.charge(n as u64)?;
        let mut a = Matrix::zeros(self.layer.d_out, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; self.layer.d_out];
        for j in 0..n {
            e[j] = 1.0;
            self.evaluate(&e, &mut col);
            a.set_col(j, &col);
            e[j] = 0.0;
        }
        Ok(a)
    }

    fn evaluate(&self, x: &[f64], y: &mut [f64]) {
        match &self.transfer {
            Transfer::Dense(m) => crate::numlin::matvec_into(m, x, y),
            Transfer::Monarch(c) => c.apply(x, y),
            Transfer::Mesh(c) => {
                let n = self.layer.d_inp.max(self.layer.d_out);
                let mut amps = vec![Complex64::new(0.0, 0.0); n];
                for (a, &xi) in amps.iter_mut().zip(x) {
                    a.re = xi;
                }
                c.propagate(&mut amps);
                for (yi, a) in y.iter_mut().zip(&amps) {
                    *yi = a.re;
                }
            }
        }
    }
}
