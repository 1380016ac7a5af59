//! d-dimensional FFT on the torus grid, axis by axis over rustfft plans.

use crate::grid::{Field, TorusGrid};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Cached forward/inverse plans for one grid size.
pub struct NdFft {
    n: usize,
    dim: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl NdFft {
    pub fn new(grid: &TorusGrid) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n: grid.n(),
            dim: grid.dim(),
            forward: planner.plan_fft_forward(grid.n()),
            inverse: planner.plan_fft_inverse(grid.n()),
        }
    }

    pub fn vol(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// In-place forward DFT (no normalization).
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    /// In-place inverse DFT, scaled by 1/N^d.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, false);
        let scale = 1.0 / self.vol() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn transform(&self, data: &mut [Complex64], fwd: bool) {
        let n = self.n;
        let vol = self.vol();
        assert_eq!(data.len(), vol);
        let plan = if fwd { &self.forward } else { &self.inverse };
        let mut scratch = vec![Complex64::default(); n];
        // Last axis: contiguous lines.
        for line in data.chunks_exact_mut(n) {
            plan.process(line);
        }
        // Remaining axes: gather strided lines into scratch.
        for axis in (0..self.dim.saturating_sub(1)).rev() {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            let block = stride * n;
            for base in (0..vol).step_by(block) {
                for inner in 0..stride {
                    let start = base + inner;
                    for (k, s) in scratch.iter_mut().enumerate() {
                        *s = data[start + k * stride];
                    }
                    plan.process(&mut scratch);
                    for (k, s) in scratch.iter().enumerate() {
                        data[start + k * stride] = *s;
                    }
                }
            }
        }
    }
}

/// Copy a real component into a complex buffer.
pub fn to_complex(src: &[f64], dst: &mut [Complex64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = Complex64::new(*s, 0.0);
    }
}

/// Copy the real parts back into a field component.
pub fn to_real(src: &[Complex64], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.re;
    }
}

/// Signed integer frequency of FFT bin `k` on an axis of length `n`.
#[inline]
pub fn signed_freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Per-axis FFT bin indices of a flat spectral index.
pub fn spectral_coords(grid: &TorusGrid, idx: usize) -> Vec<usize> {
    grid.coords(idx)
}

/// Symbol vector of the centered difference at spectral index `idx`:
/// `sigma_l = sin(2*pi*k_l/N) / h`. Zero exactly on the unresolved set
/// (every `k_l` in `{0, N/2}`), which is also the null space of the operator.
pub fn centered_symbol(grid: &TorusGrid, coords: &[usize], out: &mut [f64]) {
    let n = grid.n();
    let h = grid.spacing();
    for (l, &k) in coords.iter().enumerate() {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        // sin(pi) must vanish exactly for the Nyquist bin.
        out[l] = if 2 * k == n || k == 0 {
            0.0
        } else {
            theta.sin() / h
        };
    }
}

/// Apply a real spectral multiplier to a scalar field (multiplier indexed by flat bin).
pub fn apply_multiplier(grid: &TorusGrid, fft: &NdFft, field: &mut Field, mult: &[f64]) {
    let vol = grid.vol();
    let mut buf = vec![Complex64::default(); vol];
    for c in 0..field.comps() {
        to_complex(field.comp(c), &mut buf);
        fft.forward(&mut buf);
        for (v, m) in buf.iter_mut().zip(mult) {
            *v *= *m;
        }
        fft.inverse(&mut buf);
        to_real(&buf, field.comp_mut(c));
    }
}
