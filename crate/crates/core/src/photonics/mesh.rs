//! Planar interferometer meshes built from 2×2 MZI or 3-splitter MZI blocks.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;

use crate::numlin::CMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockVariant {
    Mzi,
    Mzi3,
}

/// Block transfer matrix, row-major `[b00, b01, b10, b11]`.
pub fn block_entries(theta: f64, phi: f64, variant: BlockVariant) -> [Complex64; 4] {
    match variant {
        BlockVariant::Mzi => {
            let g = Complex64::from_polar(1.0, theta / 2.0);
            let e = Complex64::from_polar(1.0, phi);
            let (s, c) = (theta / 2.0).sin_cos();
            [g * e * s, g * c, g * e * c, -g * s]
        }
        BlockVariant::Mzi3 => {
            let g = Complex64::from_polar(FRAC_1_SQRT_2, (phi + theta) / 2.0);
            let (sm, cm) = ((theta - phi) / 2.0).sin_cos();
            let (sp, cp) = ((theta + phi) / 2.0).sin_cos();
            [
                g * Complex64::new(-cm, sp),
                g * Complex64::new(-sm, cp),
                g * Complex64::new(sm, cp),
                g * Complex64::new(-cm, -sp),
            ]
        }
    }
}

/// The 2×2 transfer matrix of a single programmable block.
pub fn mzi_block(theta: f64, phi: f64, variant: BlockVariant) -> CMatrix {
    CMatrix::from_vec(2, 2, block_entries(theta, phi, variant).to_vec())
}

/// Rectangular (Clements) arrangement of blocks on `n` modes.
///
/// Layer `ℓ` couples modes `(i, i+1)` for `i ≡ ℓ (mod 2)`; there are `n`
/// layers, hence `n(n−1)/2` blocks. Parameters are laid out as `(θ, φ)` per
/// block in (layer, top mode) order followed by the `n` output phases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeshLayout {
    n: usize,
    blocks: Vec<(usize, usize)>,
}

impl MeshLayout {
    pub fn clements(n: usize) -> Self {
        let mut blocks = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for layer in 0..n {
            let mut top = layer % 2;
            while top + 1 < n {
                blocks.push((layer, top));
                top += 2;
            }
        }
        Self { n, blocks }
    }

    pub fn modes(&self) -> usize {
        self.n
    }

    pub fn block_coords(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn param_count(&self) -> usize {
        2 * self.blocks.len() + self.n
    }

    pub(crate) fn compile(&self, w: &[f64], variant: BlockVariant) -> CompiledMesh {
        debug_assert_eq!(w.len(), self.param_count());
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(b, &(_, top))| (top, block_entries(w[2 * b], w[2 * b + 1], variant)))
            .collect();
        let phases = w[2 * self.blocks.len()..]
            .iter()
            .map(|&p| Complex64::from_polar(1.0, p))
            .collect();
        CompiledMesh { blocks, phases }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct CompiledMesh {
    blocks: Vec<(usize, [Complex64; 4])>,
    phases: Vec<Complex64>,
}

impl CompiledMesh {
    /// Propagates complex mode amplitudes through every block then the
    /// output phase screen.
    pub(crate) fn propagate(&self, amps: &mut [Complex64]) {
        for &(top, [b00, b01, b10, b11]) in &self.blocks {
            let (a, b) = (amps[top], amps[top + 1]);
            amps[top] = b00 * a + b01 * b;
            amps[top + 1] = b10 * a + b11 * b;
        }
        for (a, p) in amps.iter_mut().zip(&self.phases) {
            *a *= p;
        }
    }
}

/// Full complex `n×n` transfer matrix of a mesh at parameters `w`.
///
/// This is simulator internals for verification; training code only sees
/// the real read-out through the layer oracle.
pub fn transfer_matrix(layout: &MeshLayout, variant: BlockVariant, w: &[f64]) -> CMatrix {
    let n = layout.modes();
    assert_eq!(w.len(), layout.param_count(), "mesh parameter count");
    let mesh = layout.compile(w, variant);
    let mut t = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut amps = vec![Complex64::new(0.0, 0.0); n];
        amps[j] = Complex64::new(1.0, 0.0);
        mesh.propagate(&mut amps);
        for (i, a) in amps.into_iter().enumerate() {
            t[(i, j)] = a;
        }
    }
    t
}
