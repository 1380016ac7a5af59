//! BiCGStab for the heterogeneous divergence-form systems, preconditioned by
//! the exact constant-coefficient spectral inverse at the mean matrix.

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Field, TorusGrid};
use crate::operators::{self, OperatorWorkspace, Spectral};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Outcome of one Krylov solve. The residual is relative, measured in the
/// preconditioner-dual norm (the energy-dual norm of the mean medium).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

pub fn default_max_iterations(grid: &TorusGrid) -> usize {
    10 * grid.n()
}

/// Spectral preconditioner: exact inverse of `G^T abar G` for a constant
/// matrix, gauge modes annihilated.
pub struct SpectralPreconditioner<'a> {
    spectral: &'a Spectral,
    inv_symbol: Vec<f64>,
}

impl<'a> SpectralPreconditioner<'a> {
    pub fn new(spectral: &'a Spectral, abar: &[f64]) -> Result<Self> {
        Ok(Self {
            inv_symbol: spectral.constant_inverse_symbol(abar)?,
            spectral,
        })
    }

    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        let mut buf: Vec<Complex64> = src.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.spectral.fft.forward(&mut buf);
        for (b, m) in buf.iter_mut().zip(&self.inv_symbol) {
            *b *= *m;
        }
        self.spectral.fft.inverse(&mut buf);
        fft::to_real(&buf, dst);
    }
}

/// Cell-wise arithmetic mean of a coefficient field.
pub fn mean_matrix(a: &Field) -> Vec<f64> {
    let d = a.grid().dim();
    (0..d * d).map(|c| a.comp_mean(c)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    crate::stats::kahan_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Preconditioned BiCGStab on `op(x) = b`, both sides living in the gauge-free
/// subspace. `b` is consumed as a raw slice; returns the solution vector.
pub fn bicgstab(
    op: &mut dyn FnMut(&[f64], &mut [f64]),
    precond: &SpectralPreconditioner,
    b: &[f64],
    tol: f64,
    max_iterations: usize,
) -> (Vec<f64>, SolveReport) {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut bt = vec![0.0; n];
    precond.apply(b, &mut bt);
    let bnorm = dot(&bt, &bt).sqrt();
    if bnorm == 0.0 {
        return (
            x,
            SolveReport {
                iterations: 0,
                residual: 0.0,
                converged: true,
            },
        );
    }

    let mut r = bt.clone();
    let mut rhat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut omega = 1.0f64;
    let mut iterations = 0;

    while iterations < max_iterations {
        iterations += 1;
        let rho_new = dot(&rhat, &r);
        if rho_new.abs() < 1e-300 {
            // Orthogonality breakdown: restart the shadow residual.
            rhat.copy_from_slice(&r);
            rho = dot(&rhat, &r);
            if rho.abs() < 1e-300 {
                break;
            }
            p.copy_from_slice(&r);
        } else {
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
        }
        op(&p, &mut scratch);
        precond.apply(&scratch, &mut v);
        let rhat_v = dot(&rhat, &v);
        if rhat_v.abs() < 1e-300 {
            rhat.copy_from_slice(&r);
            rho = dot(&rhat, &r);
            continue;
        }
        alpha = rho / rhat_v;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let snorm = dot(&s, &s).sqrt();
        if snorm / bnorm <= tol {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            break;
        }
        op(&s, &mut scratch);
        precond.apply(&scratch, &mut t);
        let tt = dot(&t, &t);
        if tt < 1e-300 {
            break;
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
        }
        for i in 0..n {
            r[i] = s[i] - omega * t[i];
        }
        if dot(&r, &r).sqrt() / bnorm <= tol {
            break;
        }
        if omega.abs() < 1e-300 {
            break;
        }
    }

    // True-residual check; the iteration recurrences can drift.
    op(&x, &mut scratch);
    for i in 0..n {
        t[i] = b[i] - scratch[i];
    }
    precond.apply(&t, &mut scratch);
    let residual = dot(&scratch, &scratch).sqrt() / bnorm;

    (
        x,
        SolveReport {
            iterations,
            residual,
            converged: residual <= tol,
        },
    )
}

/// Solve `A_a u = div(rhs_flux)` for the mean-zero scalar `u`.
///
/// The Krylov method is BiCGStab (valid for the nonsymmetric operators the
/// links produce), preconditioned by the exact spectral inverse at the
/// arithmetic-mean matrix. Pass `transpose` to solve with `a^T`.
pub fn solve_divergence_form(
    spectral: &Spectral,
    a: &Field,
    rhs_flux: &Field,
    tol: f64,
    transpose: bool,
) -> Result<(Field, SolveReport)> {
    a.grid().check_same(rhs_flux.grid())?;
    if !(tol > 1e-14 && tol < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "solver tolerance must lie in (1e-14, 1), got {tol}"
        )));
    }
    let grid = *a.grid();
    let mut abar = mean_matrix(a);
    if transpose {
        abar = crate::matrix::transpose(&abar, grid.dim());
    }
    let precond = SpectralPreconditioner::new(spectral, &abar)?;
    let mut b_field = operators::flux_divergence(rhs_flux);
    operators::project_gauge(&grid, b_field.comp_mut(0));

    let mut ws = OperatorWorkspace::new(grid);
    let mut op = |src: &[f64], dst: &mut [f64]| {
        operators::apply_operator_into(a, src, transpose, &mut ws, dst);
    };
    let max_iterations = default_max_iterations(&grid);
    let (mut x, report) = bicgstab(&mut op, &precond, b_field.comp(0), tol, max_iterations);
    operators::project_gauge(&grid, &mut x);
    let u = Field::from_data(grid, 1, x)?;
    if !report.converged {
        return Err(Error::NoConvergence { report });
    }
    Ok((u, report))
}
