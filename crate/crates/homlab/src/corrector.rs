//! Extended corrector (phi, sigma), fluxes, and the homogenized matrix for
//! one coefficient realization.

use crate::error::Result;
use crate::grid::{Field, TorusGrid};
use crate::krylov::{self, SolveReport};
use crate::operators::{self, Spectral};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Everything the cell problems produce for one realization.
///
/// `sigma` stores, for each direction i, the strictly-upper pairs (j < k) of
/// the skew flux corrector; the (k, j) entry is the negation by construction,
/// so the skew symmetry is exact in storage.
pub struct CorrectorSet {
    pub phi: Vec<Field>,
    pub sigma: Vec<Field>,
    /// Flux per direction, restricted to the modes the calculus resolves
    /// (the Nyquist-corner content, invisible to centered differences, is
    /// projected out; its relative mass is recorded below).
    pub q: Vec<Field>,
    pub abar: Vec<f64>,
    pub reports: Vec<SolveReport>,
    pub diagnostics: CorrectorDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorDiagnostics {
    /// Relative residual of `div sigma_i = q_i - abar e_i` per direction.
    pub flux_potential_residual: Vec<f64>,
    /// Relative mass of the unresolved Nyquist-corner flux content per direction.
    pub unresolved_flux_mass: Vec<f64>,
    /// Torus average of |G phi_i|^2 per direction (bounded by 1/lambda^2).
    pub gradient_energy: Vec<f64>,
    /// Relative divergence of the flux per direction.
    pub flux_divergence: Vec<f64>,
}

/// Solve the cell problem `-div(a (grad phi_i + e_i)) = 0` for each i.
pub fn solve_corrector(
    spectral: &Spectral,
    a: &Field,
    tol: f64,
    transpose: bool,
) -> Result<(Vec<Field>, Vec<SolveReport>)> {
    let grid = *a.grid();
    let d = grid.dim();
    let mut phi = Vec::with_capacity(d);
    let mut reports = Vec::with_capacity(d);
    for i in 0..d {
        let rhs = unit_flux(a, i, transpose);
        let (u, rep) = krylov::solve_divergence_form(spectral, a, &rhs, tol, transpose)?;
        phi.push(u);
        reports.push(rep);
    }
    Ok((phi, reports))
}

/// Column i of the coefficient field as a vector field: `a e_i`.
fn unit_flux(a: &Field, i: usize, transpose: bool) -> Field {
    let grid = *a.grid();
    let d = grid.dim();
    let mut w = Field::vector(grid);
    for l in 0..d {
        let c = if transpose { i * d + l } else { l * d + i };
        w.comp_mut(l).copy_from_slice(a.comp(c));
    }
    w
}

/// Raw per-cell flux `a (G phi_i + e_i)` for one direction.
pub fn pointwise_flux(a: &Field, phi_i: &Field, i: usize, transpose: bool) -> Field {
    let grid = *a.grid();
    let d = grid.dim();
    let gphi = operators::centered_grad(phi_i);
    let mut q = Field::vector(grid);
    let vol = grid.vol();
    for l in 0..d {
        for m in 0..d {
            let c = if transpose { m * d + l } else { l * d + m };
            let am = a.comp(c);
            let gm = gphi.comp(m);
            let unit = if m == i { 1.0 } else { 0.0 };
            let dst = q.comp_mut(l);
            for idx in 0..vol {
                dst[idx] += am[idx] * (gm[idx] + unit);
            }
        }
    }
    q
}

/// Fluxes for all directions, projected onto the resolved modes. Returns the
/// fluxes together with the removed relative mass per direction.
pub fn compute_flux(a: &Field, phi: &[Field], transpose: bool) -> (Vec<Field>, Vec<f64>) {
    let grid = *a.grid();
    let d = grid.dim();
    let mut fluxes = Vec::with_capacity(d);
    let mut removed = Vec::with_capacity(d);
    for i in 0..d {
        let mut q = pointwise_flux(a, &phi[i], i, transpose);
        let before = q.norm();
        let mut gone = 0.0;
        for l in 0..d {
            let comp = q.comp_mut(l);
            let pre: f64 = comp.iter().map(|v| *v * *v).sum();
            // keep the mean (it carries abar e_i), drop the Nyquist corners
            operators::project_nyquist(&grid, comp);
            let post: f64 = comp.iter().map(|v| *v * *v).sum();
            gone += (pre - post).max(0.0);
        }
        removed.push(if before > 0.0 { gone.sqrt() / before } else { 0.0 });
        fluxes.push(q);
    }
    (fluxes, removed)
}

/// Homogenized matrix: column i is the torus average of `q_i`.
pub fn homogenized_coefficient(q: &[Field]) -> Vec<f64> {
    let d = q.len();
    let mut abar = vec![0.0; d * d];
    for (i, qi) in q.iter().enumerate() {
        for j in 0..d {
            abar[j * d + i] = qi.comp_mean(j);
        }
    }
    abar
}

/// Solve `-lap sigma_ijk = d_j q_ik - d_k q_ij` spectrally for each i and
/// each pair j < k; mean-zero, skew-enforced storage.
pub fn solve_flux_corrector(spectral: &Spectral, q: &[Field], abar: &[f64]) -> Vec<Field> {
    let grid = spectral.grid;
    let d = grid.dim();
    let vol = grid.vol();
    let pairs = d * (d - 1) / 2;
    let mut out = Vec::with_capacity(d);
    for qi in q {
        let mut sig = Field::zeros(grid, pairs.max(1));
        if pairs == 0 {
            out.push(sig);
            continue;
        }
        // FFT all components of q_i once.
        let qhat: Vec<Vec<Complex64>> = (0..d)
            .map(|l| {
                let mut buf = vec![Complex64::default(); vol];
                crate::fft::to_complex(qi.comp(l), &mut buf);
                spectral.fft.forward(&mut buf);
                buf
            })
            .collect();
        let mut pair_idx = 0;
        let mut buf = vec![Complex64::default(); vol];
        for j in 0..d {
            for k in (j + 1)..d {
                spectral.for_each_bin(|idx, sig_k| {
                    let s2: f64 = sig_k.iter().map(|s| s * s).sum();
                    buf[idx] = if s2 > 0.0 {
                        (Complex64::new(0.0, sig_k[j]) * qhat[k][idx]
                            - Complex64::new(0.0, sig_k[k]) * qhat[j][idx])
                            / s2
                    } else {
                        Complex64::default()
                    };
                });
                spectral.fft.inverse(&mut buf);
                crate::fft::to_real(&buf, sig.comp_mut(pair_idx));
                pair_idx += 1;
            }
        }
        out.push(sig);
    }
    let _ = abar;
    out
}

/// Value of sigma_{ijk} from the strictly-upper storage.
pub fn sigma_entry(sigma_i: &Field, d: usize, j: usize, k: usize, idx: usize) -> f64 {
    if j == k {
        return 0.0;
    }
    let (lo, hi, sign) = if j < k { (j, k, 1.0) } else { (k, j, -1.0) };
    // position of (lo, hi) in the j<k enumeration
    let pos = lo * d - lo * (lo + 1) / 2 + (hi - lo - 1);
    sign * sigma_i.at(pos, idx)
}

/// Row j of `div sigma_i` (centered calculus): sum_k d_k sigma_ijk.
pub fn sigma_divergence(grid: &TorusGrid, sigma_i: &Field) -> Field {
    let d = grid.dim();
    let vol = grid.vol();
    let mut out = Field::vector(*grid);
    let mut comp = vec![0.0; vol];
    let mut deriv = vec![0.0; vol];
    for j in 0..d {
        for k in 0..d {
            if j == k {
                continue;
            }
            for idx in 0..vol {
                comp[idx] = sigma_entry(sigma_i, d, j, k, idx);
            }
            operators::diff_axis(grid, &comp, k, operators::Scheme::Centered, &mut deriv);
            let dst = out.comp_mut(j);
            for idx in 0..vol {
                dst[idx] += deriv[idx];
            }
        }
    }
    out
}

/// Full pipeline for one realization: correctors, fluxes, homogenized matrix,
/// flux correctors, and the diagnostic residuals.
pub fn build_corrector_set(
    spectral: &Spectral,
    a: &Field,
    tol: f64,
    transpose: bool,
) -> Result<CorrectorSet> {
    let grid = *a.grid();
    let d = grid.dim();
    let (phi, reports) = solve_corrector(spectral, a, tol, transpose)?;
    let (q, unresolved) = compute_flux(a, &phi, transpose);
    let abar = homogenized_coefficient(&q);
    let sigma = solve_flux_corrector(spectral, &q, &abar);

    let mut flux_potential_residual = Vec::with_capacity(d);
    let mut gradient_energy = Vec::with_capacity(d);
    let mut flux_div = Vec::with_capacity(d);
    for i in 0..d {
        let qnorm = q[i].norm().max(1e-300);
        let divs = sigma_divergence(&grid, &sigma[i]);
        let mut err = 0.0;
        for j in 0..d {
            let target_mean = abar[j * d + i];
            let qj = q[i].comp(j);
            let dj = divs.comp(j);
            for idx in 0..grid.vol() {
                let r = dj[idx] - (qj[idx] - target_mean);
                err += r * r;
            }
        }
        flux_potential_residual.push(err.sqrt() / qnorm);
        let gphi = operators::centered_grad(&phi[i]);
        gradient_energy.push(
            gphi.data().iter().map(|v| v * v).sum::<f64>() / grid.vol() as f64,
        );
        flux_div.push(operators::flux_divergence(&q[i]).norm() / qnorm);
    }

    Ok(CorrectorSet {
        phi,
        sigma,
        q,
        abar,
        reports,
        diagnostics: CorrectorDiagnostics {
            flux_potential_residual,
            unresolved_flux_mass: unresolved,
            gradient_energy,
            flux_divergence: flux_div,
        },
    })
}
