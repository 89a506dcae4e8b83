//! Free-space Monarch layer: two block-diagonal complex phase screens with
//! a row-major/column-major interleave between them, real part at read-out.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Block geometry of an optical Monarch layer.
///
/// `d_inp = b_r · n_r_inp`, `d_out = b_l · n_l_out`, and the inner sizes
/// follow from chaining the two stages: `n_r_out = b_l`, `n_l_inp = b_r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonarchShape {
    pub b_r: usize,
    pub n_r_inp: usize,
    pub n_r_out: usize,
    pub b_l: usize,
    pub n_l_inp: usize,
    pub n_l_out: usize,
}

/// Splits a power of two into the two nearest powers of two, `(blocks, size)`
/// with `size ≥ blocks`.
fn split_pow2(d: usize) -> Option<(usize, usize)> {
    if d == 0 || !d.is_power_of_two() {
        return None;
    }
    let k = d.trailing_zeros();
    let blocks = 1usize << (k / 2);
    Some((blocks, d / blocks))
}

impl MonarchShape {
    pub fn new(d_inp: usize, d_out: usize) -> Result<Self> {
        let (b_r, n_r_inp) = split_pow2(d_inp).ok_or_else(|| {
            Error::Config(format!("monarch layer needs a power-of-two d_inp, got {d_inp}"))
        })?;
        let (b_l, n_l_out) = split_pow2(d_out).ok_or_else(|| {
            Error::Config(format!("monarch layer needs a power-of-two d_out, got {d_out}"))
        })?;
        Ok(Self {
            b_r,
            n_r_inp,
            n_r_out: b_l,
            b_l,
            n_l_inp: b_r,
            n_l_out,
        })
    }

    pub fn d_inp(&self) -> usize {
        self.b_r * self.n_r_inp
    }

    pub fn d_out(&self) -> usize {
        self.b_l * self.n_l_out
    }

    pub fn r_params(&self) -> usize {
        self.b_r * self.n_r_out * self.n_r_inp
    }

    pub fn l_params(&self) -> usize {
        self.b_l * self.n_l_out * self.n_l_inp
    }

    pub fn param_count(&self) -> usize {
        self.r_params() + self.l_params()
    }

    /// Phases → unit-modulus block entries. `w` holds the R blocks first
    /// (block, row, col), then the L blocks in the same order.
    pub(crate) fn compile(&self, w: &[f64]) -> CompiledMonarch {
        debug_assert_eq!(w.len(), self.param_count());
        let (w_r, w_l) = w.split_at(self.r_params());
        let nr = 1.0 / (self.n_r_inp as f64).sqrt();
        let nl = 1.0 / (self.n_l_inp as f64).sqrt();
        CompiledMonarch {
            shape: *self,
            r: w_r.iter().map(|&t| Complex64::from_polar(nr, t)).collect(),
            l: w_l.iter().map(|&t| Complex64::from_polar(nl, t)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct CompiledMonarch {
    shape: MonarchShape,
    r: Vec<Complex64>,
    l: Vec<Complex64>,
}

impl CompiledMonarch {
    pub(crate) fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = &self.shape;
        // Stage R: block i maps x[i, :] (length n_r_inp) to h[i, :] (length b_l).
        let mut h = vec![Complex64::new(0.0, 0.0); s.b_r * s.b_l];
        for i in 0..s.b_r {
            let xi = &x[i * s.n_r_inp..(i + 1) * s.n_r_inp];
            for l in 0..s.b_l {
                let row = &self.r[(i * s.b_l + l) * s.n_r_inp..][..s.n_r_inp];
                h[i * s.b_l + l] = row.iter().zip(xi).map(|(r, &x)| r * x).sum();
            }
        }
        // Transposed read of h is the permutation; stage L block l consumes h[:, l].
        for l in 0..s.b_l {
            for j in 0..s.n_l_out {
                let row = &self.l[(l * s.n_l_out + j) * s.b_r..][..s.b_r];
                let z: Complex64 = row
                    .iter()
                    .enumerate()
                    .map(|(i, lji)| lji * h[i * s.b_l + l])
                    .sum();
                y[l * s.n_l_out + j] = z.re;
            }
        }
    }
}

/// Monarch read-out for explicit phase vectors, bypassing any layer
/// accounting.
pub fn monarch_forward(shape: &MonarchShape, theta_r: &[f64], theta_l: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if theta_r.len() != shape.r_params() || theta_l.len() != shape.l_params() {
        return Err(Error::Dimension(format!(
            "monarch phases: expected {}+{}, got {}+{}",
            shape.r_params(),
            shape.l_params(),
            theta_r.len(),
            theta_l.len()
        )));
    }
    if x.len() != shape.d_inp() {
        return Err(Error::Dimension(format!(
            "monarch input: expected {}, got {}",
            shape.d_inp(),
            x.len()
        )));
    }
    let mut w = theta_r.to_vec();
    w.extend_from_slice(theta_l);
    let mut y = vec![0.0; shape.d_out()];
    shape.compile(&w).apply(x, &mut y);
    Ok(y)
}
