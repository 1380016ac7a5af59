//! Stationary Gaussian fields with algebraically decaying covariance,
//! synthesized by circulant embedding, and the link maps that turn them
//! into admissible coefficient fields.

use crate::error::{Error, Result};
use crate::fft::NdFft;
use crate::grid::{Field, TorusGrid};
use crate::matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Pointwise map from Gaussian channels to a coefficient matrix.
///
/// `lambda` is the ellipticity floor; `kappa` the antisymmetric amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LinkKind {
    /// `(lambda + (1-lambda) * logistic(g)) * Id`, one channel.
    ScalarSigmoid { lambda: f64 },
    /// Independent sigmoid per diagonal entry, d channels.
    DiagonalSigmoid { lambda: f64 },
    /// Scalar sigmoid with range [lambda+kappa, 1-kappa] plus a skew part
    /// with entries `kappa * tanh(g)`, `1 + d(d-1)/2` channels.
    Nonsymmetric { lambda: f64, kappa: f64 },
}

impl LinkKind {
    pub fn lambda(&self) -> f64 {
        match self {
            LinkKind::ScalarSigmoid { lambda }
            | LinkKind::DiagonalSigmoid { lambda }
            | LinkKind::Nonsymmetric { lambda, .. } => *lambda,
        }
    }

    pub fn channels(&self, dim: usize) -> usize {
        match self {
            LinkKind::ScalarSigmoid { .. } => 1,
            LinkKind::DiagonalSigmoid { .. } => dim,
            LinkKind::Nonsymmetric { .. } => 1 + dim * (dim - 1) / 2,
        }
    }

    fn validate(&self) -> Result<()> {
        let lambda = self.lambda();
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ellipticity floor lambda must lie in (0, 1], got {lambda}"
            )));
        }
        if let LinkKind::Nonsymmetric { lambda, kappa } = self {
            if !(*kappa >= 0.0 && *kappa <= (1.0 - lambda) / 2.0) {
                return Err(Error::InvalidConfig(format!(
                    "skew amplitude kappa must lie in [0, (1-lambda)/2], got {kappa}"
                )));
            }
        }
        Ok(())
    }
}

/// Law of the coefficient field: covariance decay `c0 * (1+|x|)^(-beta)`
/// in dimension `dim`, mapped through `link`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub beta: f64,
    pub c0: f64,
    pub dim: usize,
    pub link: LinkKind,
}

impl CovarianceSpec {
    pub fn new(beta: f64, c0: f64, dim: usize, link: LinkKind) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "decay exponent beta must be positive, got {beta}"
            )));
        }
        if !(c0 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "prefactor c0 must be positive, got {c0}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("dimension must be >= 1".into()));
        }
        link.validate()?;
        Ok(Self { beta, c0, dim, link })
    }
}

/// One synthesized Gaussian channel.
#[derive(Debug, Clone)]
pub struct GaussianField {
    pub field: Field,
    pub seed: u64,
    /// Fraction of spectral mass removed when clipping negative embedding
    /// eigenvalues.
    pub clipped_mass: f64,
}

pub const DEFAULT_CLIP_TOL: f64 = 1e-3;

/// Target covariance evaluated at every lag on the grid:
/// `kernel[z] = c0 * (1 + dist(0, z))^(-beta)` with minimum-image distance.
pub fn build_covariance_kernel(spec: &CovarianceSpec, grid: &TorusGrid) -> Field {
    let origin = vec![0.0; grid.dim()];
    Field::scalar_from_fn(*grid, |x| {
        let dist = grid.min_image_distance(x, &origin);
        spec.c0 * (1.0 + dist).powf(-spec.beta)
    })
}

/// Spectrum of the periodized kernel, clipped to be nonnegative, plus the
/// removed mass fraction. The square root of this spectrum is the synthesis
/// multiplier.
pub fn embedding_spectrum(spec: &CovarianceSpec, grid: &TorusGrid, fft: &NdFft) -> (Vec<f64>, f64) {
    let kernel = build_covariance_kernel(spec, grid);
    let mut buf: Vec<Complex64> = kernel.comp(0).iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut buf);
    let mut total = 0.0;
    let mut clipped = 0.0;
    let mut spectrum = Vec::with_capacity(buf.len());
    for v in &buf {
        // The kernel is even on the torus, so the spectrum is real.
        let s = v.re;
        total += s.abs();
        if s < 0.0 {
            clipped += -s;
            spectrum.push(0.0);
        } else {
            spectrum.push(s);
        }
    }
    (spectrum, if total > 0.0 { clipped / total } else { 0.0 })
}

/// RNG for one (master seed, sample, channel) triple. ChaCha streams keep
/// samples independent and reproducible regardless of scheduling.
pub fn channel_rng(master_seed: u64, sample_index: u64, channel_index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(sample_index.wrapping_mul(64).wrapping_add(channel_index));
    rng
}

/// Draw one stationary centered Gaussian field. Deterministic in
/// (spec, grid, seed triple); two equal calls give bit-identical output.
pub fn synthesize_gaussian(
    spec: &CovarianceSpec,
    grid: &TorusGrid,
    fft: &NdFft,
    master_seed: u64,
    sample_index: u64,
    channel_index: u64,
    clip_tol: f64,
) -> Result<GaussianField> {
    let (spectrum, clipped_mass) = embedding_spectrum(spec, grid, fft);
    if clipped_mass > clip_tol {
        return Err(Error::ClippedSpectrum {
            mass: clipped_mass,
            tol: clip_tol,
        });
    }
    synthesize_with_spectrum(grid, fft, &spectrum, clipped_mass, master_seed, sample_index, channel_index)
}

/// Synthesis step with a precomputed clipped spectrum (the per-sample path
/// of the ensemble driver, which validates the spectrum once).
pub fn synthesize_with_spectrum(
    grid: &TorusGrid,
    fft: &NdFft,
    spectrum: &[f64],
    clipped_mass: f64,
    master_seed: u64,
    sample_index: u64,
    channel_index: u64,
) -> Result<GaussianField> {
    let vol = grid.vol();
    let mut rng = channel_rng(master_seed, sample_index, channel_index);
    let mut buf: Vec<Complex64> = (0..vol)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    // White noise through the filter F^-1 sqrt(S) F has covariance exactly
    // the clipped periodized kernel; real input keeps the output real.
    fft.forward(&mut buf);
    for (v, s) in buf.iter_mut().zip(spectrum) {
        *v *= s.sqrt();
    }
    fft.inverse(&mut buf);
    let mut field = Field::scalar(*grid);
    for (dst, src) in field.comp_mut(0).iter_mut().zip(&buf) {
        *dst = src.re;
    }
    Ok(GaussianField {
        field,
        seed: master_seed ^ sample_index.rotate_left(32) ^ channel_index.rotate_left(48),
        clipped_mass,
    })
}

/// Map Gaussian channels through the link into a per-cell coefficient matrix
/// field, then verify boundedness and coercivity cell by cell.
pub fn apply_link(spec: &CovarianceSpec, channels: &[GaussianField]) -> Result<Field> {
    let d = spec.dim;
    let need = spec.link.channels(d);
    if channels.len() != need {
        return Err(Error::InvalidConfig(format!(
            "link needs {need} Gaussian channels, got {}",
            channels.len()
        )));
    }
    let grid = *channels[0].field.grid();
    for ch in channels {
        grid.check_same(ch.field.grid())?;
    }
    let vol = grid.vol();
    let mut a = Field::zeros(grid, d * d);
    match spec.link {
        LinkKind::ScalarSigmoid { lambda } => {
            let g = channels[0].field.comp(0);
            for idx in 0..vol {
                let v = lambda + (1.0 - lambda) * logistic(g[idx]);
                for i in 0..d {
                    a.set(i * d + i, idx, v);
                }
            }
        }
        LinkKind::DiagonalSigmoid { lambda } => {
            for i in 0..d {
                let g = channels[i].field.comp(0);
                for idx in 0..vol {
                    let v = lambda + (1.0 - lambda) * logistic(g[idx]);
                    a.set(i * d + i, idx, v);
                }
            }
        }
        LinkKind::Nonsymmetric { lambda, kappa } => {
            let g0 = channels[0].field.comp(0);
            for idx in 0..vol {
                let v = (lambda + kappa) + (1.0 - lambda - 2.0 * kappa) * logistic(g0[idx]);
                for i in 0..d {
                    a.set(i * d + i, idx, v);
                }
            }
            let mut ch = 1;
            for j in 0..d {
                for k in (j + 1)..d {
                    let g = channels[ch].field.comp(0);
                    for idx in 0..vol {
                        let s = kappa * g[idx].tanh();
                        a.set(j * d + k, idx, s);
                        a.set(k * d + j, idx, -s);
                    }
                    ch += 1;
                }
            }
        }
    }
    check_admissible(&a, spec.link.lambda())?;
    Ok(a)
}

/// Per-cell admissibility: operator norm at most 1 and symmetric part
/// coercive with constant `lambda` (up to rounding slack).
pub fn check_admissible(a: &Field, lambda: f64) -> Result<()> {
    let grid = a.grid();
    let d = grid.dim();
    let vol = grid.vol();
    let tol = 1e-12;
    let mut cell = vec![0.0; d * d];
    for idx in 0..vol {
        for c in 0..d * d {
            cell[c] = a.at(c, idx);
        }
        let norm = matrix::operator_norm(&cell, d);
        if norm > 1.0 + tol {
            return Err(Error::Admissibility {
                cell: idx,
                detail: format!("operator norm {norm} exceeds 1"),
            });
        }
        let lo = matrix::min_sym_eigenvalue(&cell, d);
        if lo < lambda - tol {
            return Err(Error::Admissibility {
                cell: idx,
                detail: format!("symmetric part eigenvalue {lo} below floor {lambda}"),
            });
        }
    }
    Ok(())
}

/// Coefficient field for a constant matrix.
pub fn constant_coefficient(grid: TorusGrid, m: &[f64]) -> Field {
    let d = grid.dim();
    assert_eq!(m.len(), d * d);
    let mut a = Field::zeros(grid, d * d);
    for c in 0..d * d {
        a.comp_mut(c).fill(m[c]);
    }
    a
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Ensemble estimate of the radial covariance, binned on unit-width annuli
/// of minimum-image distance, paired with the kernel averaged over the same
/// cells. Returns `(bin_center, estimate, kernel_average)` for radii up to
/// `max_lag`.
pub fn empirical_radial_covariance(
    spec: &CovarianceSpec,
    grid: &TorusGrid,
    fft: &NdFft,
    fields: &[Field],
    max_lag: f64,
) -> Vec<(f64, f64, f64)> {
    let vol = grid.vol();
    let n = fields.len();
    let mut ens_mean = vec![0.0; vol];
    for f in fields {
        for (m, v) in ens_mean.iter_mut().zip(f.comp(0)) {
            *m += v / n as f64;
        }
    }
    let mut acc = vec![0.0; vol];
    let mut buf = vec![Complex64::default(); vol];
    for f in fields {
        for ((b, v), m) in buf.iter_mut().zip(f.comp(0)).zip(&ens_mean) {
            *b = Complex64::new(v - m, 0.0);
        }
        fft.forward(&mut buf);
        for b in buf.iter_mut() {
            *b = Complex64::new(b.norm_sqr(), 0.0);
        }
        fft.inverse(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.re / (vol * n) as f64;
        }
    }
    let kernel = build_covariance_kernel(spec, grid);
    let origin = vec![0.0; grid.dim()];
    let bins = max_lag.floor() as usize;
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); bins + 1];
    for idx in 0..vol {
        let dist = grid.min_image_distance(&grid.position(idx), &origin);
        let bin = (dist + 0.5).floor() as usize;
        if bin <= bins && (dist - bin as f64).abs() <= 0.5 {
            sums[bin].0 += acc[idx];
            sums[bin].1 += kernel.at(0, idx);
            sums[bin].2 += 1;
        }
    }
    sums.into_iter()
        .enumerate()
        .filter(|(_, (_, _, cnt))| *cnt > 0)
        .map(|(r, (est, ker, cnt))| (r as f64, est / cnt as f64, ker / cnt as f64))
        .collect()
}
