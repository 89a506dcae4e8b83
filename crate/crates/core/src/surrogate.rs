//! Rank-`r` surrogate `U·S·Vᵀ ≈ A(w)` and its query-only online update.
//!
//! The surrogate is the only differentiable stand-in for a black-box layer:
//! it carries gradients backwards while the layer itself is only queried.
//! After every parameter change `w₀ → w₁` the factors are realigned by an
//! implicit projector-splitting step that touches the layer through forward
//! queries alone: `r` paired queries along the columns of `V₀` and
//! `M_sm` paired Gaussian probes for the transpose action.

use crate::error::{Error, Result};
use crate::numlin::{axpy, qr_thin, svd_trunc, Matrix, RngStream};
use crate::photonics::BlackBoxLayer;

/// Factors drift further than this from orthonormal get a QR polish.
const POLISH_THRESHOLD: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    u: Matrix,
    s: Matrix,
    v: Matrix,
}

impl SurrogateModel {
    /// Checks shapes; the caller is responsible for orthonormal `u` and `v`.
    pub fn from_factors(u: Matrix, s: Matrix, v: Matrix) -> Result<Self> {
        let r = s.rows();
        if s.cols() != r || u.cols() != r || v.cols() != r || r == 0 {
            return Err(Error::Dimension(format!(
                "surrogate factors U {:?}, S {:?}, V {:?} are inconsistent",
                u.shape(),
                s.shape(),
                v.shape()
            )));
        }
        Ok(Self { u, s, v })
    }

    pub fn rank(&self) -> usize {
        self.s.rows()
    }

    pub fn d_inp(&self) -> usize {
        self.v.rows()
    }

    pub fn d_out(&self) -> usize {
        self.u.rows()
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn s(&self) -> &Matrix {
        &self.s
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    /// `U·(S·(Vᵀx))`; no oracle queries.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_inp() {
            return Err(Error::Dimension(format!(
                "surrogate input: expected {}, got {}",
                self.d_inp(),
                x.len()
            )));
        }
        let t = self.v.tr_matvec(x);
        let t = self.s.matvec(&t);
        Ok(self.u.matvec(&t))
    }

    /// `V·(Sᵀ·(Uᵀv))`, the surrogate's input gradient for an output error `v`.
    pub fn backward_input(&self, err: &[f64]) -> Result<Vec<f64>> {
        if err.len() != self.d_out() {
            return Err(Error::Dimension(format!(
                "surrogate error vector: expected {}, got {}",
                self.d_out(),
                err.len()
            )));
        }
        let t = self.u.tr_matvec(err);
        let t = self.s.tr_matvec(&t);
        Ok(self.v.matvec(&t))
    }

    /// Row-wise [`backward_input`](Self::backward_input) over a batch.
    pub fn backward_rows(&self, errs: &Matrix) -> Result<Matrix> {
        if errs.cols() != self.d_out() {
            return Err(Error::Dimension(format!(
                "surrogate error batch width {} != {}",
                errs.cols(),
                self.d_out()
            )));
        }
        // (E·U)·S·Vᵀ keeps the work at O(b·r·(d_inp + d_out)).
        let eu = errs.matmul(&self.u);
        let eus = eu.matmul(&self.s);
        Ok(eus.matmul_t(&self.v))
    }

    pub fn to_dense(&self) -> Matrix {
        self.u.matmul(&self.s).matmul_t(&self.v)
    }

    /// Larger of `‖UᵀU − I‖_F` and `‖VᵀV − I‖_F`.
    pub fn orthonormality_defect(&self) -> f64 {
        self.u.orthonormality_defect().max(self.v.orthonormality_defect())
    }

    fn polish(mut self) -> Self {
        if self.u.orthonormality_defect() > POLISH_THRESHOLD {
            let (q, r) = qr_thin(&self.u);
            self.u = q;
            self.s = r.matmul(&self.s);
        }
        if self.v.orthonormality_defect() > POLISH_THRESHOLD {
            let (q, r) = qr_thin(&self.v);
            self.v = q;
            self.s = self.s.matmul_t(&r);
        }
        self
    }
}

/// How the transpose action `(ΔA)ᵀU` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// Average of `M` Gaussian probes, one paired query each.
    Stochastic(usize),
    /// Dense reconstruction of both settings (`d_inp` queries each).
    /// Meant for verification; its cost does not follow the `2r + 2M` rule.
    Exact,
}

/// Queries one I-PSI update costs with `m_sm` stochastic probes.
pub fn ipsi_query_cost(rank: usize, m_sm: usize) -> u64 {
    2 * rank as u64 + 2 * m_sm as u64
}

fn check_rank(r: usize, d_inp: usize, d_out: usize) -> Result<()> {
    if r == 0 || r > d_inp.min(d_out) {
        return Err(Error::Config(format!(
            "surrogate rank {r} must lie in 1..={} for a {d_inp}->{d_out} layer",
            d_inp.min(d_out)
        )));
    }
    Ok(())
}

/// Surrogate from a full reconstruction followed by a truncated SVD.
pub fn init_oracle(layer: &BlackBoxLayer, r: usize) -> Result<SurrogateModel> {
    check_rank(r, layer.d_inp(), layer.d_out())?;
    let a = layer.materialize()?;
    let svd = svd_trunc(&a, r)?;
    SurrogateModel::from_factors(svd.u.clone(), svd.s_matrix(), svd.v)
}

/// Randomized range-finder initialization.
///
/// `Y = A·Ω` costs `r + oversample` queries; the row space is recovered
/// from `AᵀQ`, estimated with `mode` (`M` queries when stochastic), and the
/// small sketch is truncated to rank `r`.
pub fn init_sketch(
    layer: &BlackBoxLayer,
    r: usize,
    oversample: usize,
    mode: ProbeMode,
    stream: &mut RngStream,
) -> Result<SurrogateModel> {
    check_rank(r, layer.d_inp(), layer.d_out())?;
    let p = r + oversample;
    if p > layer.d_inp().min(layer.d_out()) {
        return Err(Error::Config(format!(
            "rank + oversample = {p} exceeds min(d_inp, d_out) = {}",
            layer.d_inp().min(layer.d_out())
        )));
    }
    if let ProbeMode::Stochastic(0) = mode {
        return Err(Error::Config("sketch initialization needs at least one probe".into()));
    }
    let d_inp = layer.d_inp();
    let device = layer.programmed();
    let omega = Matrix::from_vec(p, d_inp, stream.normal_vec(p * d_inp));
    let y = device.apply_rows(&omega)?.transpose();
    let (q, _) = qr_thin(&y);

    // Bᵀ = AᵀQ, d_inp × p.
    let bt = match mode {
        ProbeMode::Exact => layer.materialize()?.t_matmul(&q),
        ProbeMode::Stochastic(m) => {
            let mut acc = Matrix::zeros(d_inp, p);
            let mut z = vec![0.0; d_inp];
            for _ in 0..m {
                stream.fill_normal(&mut z);
                let az = device.apply(&z)?;
                let t = q.tr_matvec(&az);
                accumulate_outer(&mut acc, &z, &t);
            }
            acc.scale_assign(1.0 / m as f64);
            acc
        }
    };
    // A ≈ Q·B = (Q·W̃)·Σ·Ũᵀ where Bᵀ = Ũ·Σ·W̃ᵀ.
    let svd = svd_trunc(&bt, r)?;
    SurrogateModel::from_factors(q.matmul(&svd.v), svd.s_matrix(), svd.u).map(SurrogateModel::polish)
}

/// `acc += z ⊗ t`
fn accumulate_outer(acc: &mut Matrix, z: &[f64], t: &[f64]) {
    for (i, &zi) in z.iter().enumerate() {
        axpy(zi, t, acc.row_mut(i));
    }
}

/// Estimate of `(A(w₁) − A(w₀))ᵀ·U`.
///
/// Stochastic mode averages `z·((ΔA·z)ᵀU)` over `M` standard-normal probes,
/// querying `w₁` then `w₀` for each probe; since `E[zzᵀ] = I` the average is
/// unbiased.
pub fn transpose_probe(
    layer: &BlackBoxLayer,
    w0: &[f64],
    w1: &[f64],
    u: &Matrix,
    mode: ProbeMode,
    stream: &mut RngStream,
) -> Result<Matrix> {
    if u.rows() != layer.d_out() {
        return Err(Error::Dimension(format!(
            "probe basis has {} rows, layer d_out is {}",
            u.rows(),
            layer.d_out()
        )));
    }
    let before = layer.program(w0)?;
    let after = layer.program(w1)?;
    match mode {
        ProbeMode::Exact => {
            let delta = layer.materialize_at(w1)?.sub(&layer.materialize_at(w0)?);
            Ok(delta.t_matmul(u))
        }
        ProbeMode::Stochastic(m) => {
            if m == 0 {
                return Err(Error::Config("transpose probe needs M_sm >= 1".into()));
            }
            let d_inp = layer.d_inp();
            let mut acc = Matrix::zeros(d_inp, u.cols());
            let mut z = vec![0.0; d_inp];
            let mut y1 = vec![0.0; layer.d_out()];
            let mut y0 = vec![0.0; layer.d_out()];
            for _ in 0..m {
                stream.fill_normal(&mut z);
                after.apply_into(&z, &mut y1)?;
                before.apply_into(&z, &mut y0)?;
                for (a, b) in y1.iter_mut().zip(&y0) {
                    *a -= b;
                }
                let t = u.tr_matvec(&y1);
                accumulate_outer(&mut acc, &z, &t);
            }
            acc.scale_assign(1.0 / m as f64);
            Ok(acc)
        }
    }
}

/// One implicit projector-splitting step tracking `A(w₀) → A(w₁)`.
///
/// The stochastic mode spends exactly `2r + 2M` queries. The budget is
/// checked up front so a short budget fails before any query is made, and
/// the input model is never modified.
pub fn ipsi_update(
    sm: &SurrogateModel,
    layer: &BlackBoxLayer,
    w0: &[f64],
    w1: &[f64],
    mode: ProbeMode,
    stream: &mut RngStream,
) -> Result<SurrogateModel> {
    let r = sm.rank();
    if sm.d_inp() != layer.d_inp() || sm.d_out() != layer.d_out() {
        return Err(Error::Dimension(format!(
            "surrogate is {}->{}, layer is {}->{}",
            sm.d_inp(),
            sm.d_out(),
            layer.d_inp(),
            layer.d_out()
        )));
    }
    let cost = match mode {
        ProbeMode::Stochastic(m) => ipsi_query_cost(r, m),
        ProbeMode::Exact => 2 * r as u64 + 2 * layer.d_inp() as u64,
    };
    layer.ensure_budget(cost)?;

    let before = layer.program(w0)?;
    let after = layer.program(w1)?;

    // P₁ = ΔA·V₀ from r paired queries.
    let mut p1 = Matrix::zeros(layer.d_out(), r);
    for j in 0..r {
        let vj = sm.v.col(j);
        let y1 = after.apply(&vj)?;
        let y0 = before.apply(&vj)?;
        let pj: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
        p1.set_col(j, &pj);
    }

    // K₁ = U₀S₀ + P₁ = U₁·S̃₀, then Ŝ₀ = S̃₀ − U₁ᵀP₁.
    let k1 = sm.u.matmul(&sm.s).add(&p1);
    let (u1, s_tilde) = qr_thin(&k1);
    let s_hat = s_tilde.sub(&u1.t_matmul(&p1));

    // P₂ ≈ (ΔA)ᵀU₁, then L₁ = V₀Ŝ₀ᵀ + P₂ = V₁·S₁ᵀ.
    let p2 = transpose_probe(layer, w0, w1, &u1, mode, stream)?;
    let l1 = sm.v.matmul_t(&s_hat).add(&p2);
    let (v1, s1t) = qr_thin(&l1);

    Ok(SurrogateModel {
        u: u1,
        s: s1t.transpose(),
        v: v1,
    }
    .polish())
}
