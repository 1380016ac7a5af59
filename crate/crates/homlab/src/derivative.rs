//! Functional derivatives of the commutator functionals with respect to the
//! coefficient field, their finite-difference verification, and the weighted
//! norm diagnostic.
//!
//! The derivative fields are assembled from adjoint solves so that the
//! pairing with a perturbation equals the exact derivative of the discrete
//! functionals; the finite-difference check then converges at second order
//! in the step.

use crate::corrector::CorrectorSet;
use crate::error::{Error, Result};
use crate::functionals::{self, ScaleFields};
use crate::grid::{Field, TorusGrid};
use crate::krylov;
use crate::matrix;
use crate::operators::{self, Spectral};
use serde::{Deserialize, Serialize};

/// Compactly supported coefficient perturbation with unit sup bound.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub b: Field,
    pub support: Vec<usize>,
}

impl Perturbation {
    /// Symmetric random bump at a single cell, scaled to the given operator
    /// norm (at most 1).
    pub fn single_cell_symmetric(
        grid: TorusGrid,
        cell: usize,
        magnitude: f64,
        entries: &[f64],
    ) -> Result<Self> {
        if !(magnitude > 0.0 && magnitude <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "perturbation magnitude must lie in (0, 1], got {magnitude}"
            )));
        }
        let d = grid.dim();
        assert_eq!(entries.len(), d * d);
        let sym = matrix::sym_part(entries, d);
        let norm = matrix::operator_norm(&sym, d).max(1e-300);
        let mut b = Field::tensor(grid);
        for i in 0..d {
            for j in 0..d {
                b.set(i * d + j, cell, sym[i * d + j] / norm * magnitude);
            }
        }
        Ok(Self {
            b,
            support: vec![cell],
        })
    }

    pub fn sup_norm(&self) -> f64 {
        let grid = self.b.grid();
        let d = grid.dim();
        let mut cell = vec![0.0; d * d];
        let mut sup = 0.0f64;
        for &idx in &self.support {
            for c in 0..d * d {
                cell[c] = self.b.at(c, idx);
            }
            sup = sup.max(matrix::operator_norm(&cell, d));
        }
        sup
    }

    fn validate(&self) -> Result<()> {
        if self.sup_norm() > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig(
                "perturbation exceeds the unit sup bound".into(),
            ));
        }
        Ok(())
    }
}

/// A derivative with respect to the coefficient field: one d x d matrix per
/// cell; pairing against perturbations carries the cell-volume weight.
pub struct DerivativeField {
    pub value: Field,
}

impl DerivativeField {
    /// `int dX : b` over the torus.
    pub fn pair(&self, p: &Perturbation) -> f64 {
        let grid = self.value.grid();
        let w = grid.cell_volume();
        let comps = self.value.comps();
        let mut s = 0.0;
        for &idx in &p.support {
            for c in 0..comps {
                s += self.value.at(c, idx) * p.b.at(c, idx);
            }
        }
        s * w
    }
}

/// Accumulate `weight * x ⊗ (y + e_i)` into a tensor field (`unit` optional).
fn add_outer(dst: &mut Field, x: &Field, y: &Field, unit: Option<usize>, weight: f64) {
    let grid = *dst.grid();
    let d = grid.dim();
    let vol = grid.vol();
    for l in 0..d {
        for m in 0..d {
            let u = match unit {
                Some(i) if m == i => 1.0,
                _ => 0.0,
            };
            let xs = x.comp(l);
            let ys = y.comp(m);
            let dstc = dst.comp_mut(l * d + m);
            for idx in 0..vol {
                dstc[idx] += weight * xs[idx] * (ys[idx] + u);
            }
        }
    }
}

/// Flux `(a^T - abar^T) g` for the adjoint auxiliary problems.
fn transpose_deviation_flux(a: &Field, abar: &[f64], g: &Field) -> Field {
    let grid = *a.grid();
    let d = grid.dim();
    let vol = grid.vol();
    let mut out = Field::vector(grid);
    for l in 0..d {
        let dst = out.comp_mut(l);
        for m in 0..d {
            let ac = a.comp(m * d + l);
            let am = abar[m * d + l];
            let gm = g.comp(m);
            for idx in 0..vol {
                dst[idx] += (ac[idx] - am) * gm[idx];
            }
        }
    }
    out
}

/// Derivative of `J0(F)` at scale eps. For each direction an auxiliary field
/// solves the transposed problem driven by the deviation flux of the F-row;
/// the derivative is the outer product against the corrector gradients.
pub fn functional_derivative_j0(
    spectral: &Spectral,
    a: &Field,
    set: &CorrectorSet,
    abar: &[f64],
    scale: &ScaleFields,
    tol: f64,
) -> Result<DerivativeField> {
    let grid = spectral.grid;
    let d = grid.dim();
    let weight = scale.eps.powi(d as i32);
    let f_fast = scale.big_f_as_fast(&grid)?;
    let mut value = Field::tensor(grid);
    for i in 0..d {
        let mut row = Field::vector(grid);
        for j in 0..d {
            row.comp_mut(j).copy_from_slice(f_fast.comp(i * d + j));
        }
        let flux = transpose_deviation_flux(a, abar, &row);
        let (s_i, _) = krylov::solve_divergence_form(spectral, a, &flux, tol, true)?;
        let mut lhs = operators::centered_grad(&s_i);
        lhs.axpy(1.0, &row);
        let gphi = operators::centered_grad(&set.phi[i]);
        add_outer(&mut value, &lhs, &gphi, Some(i), weight);
    }
    Ok(DerivativeField { value })
}

/// Derivative of `E(f, g)` at scale eps with frozen centerings. The adjoint
/// solves are driven by `(a^T - abar^T) g` for the solution part and by
/// `(a^T - abar^T)(g d_i ubar)` for the corrector part.
pub fn functional_derivative_e(
    spectral: &Spectral,
    a: &Field,
    set: &CorrectorSet,
    abar: &[f64],
    scale: &ScaleFields,
    v: &Field,
    tol: f64,
) -> Result<DerivativeField> {
    let grid = spectral.grid;
    let d = grid.dim();
    let vol = grid.vol();
    let weight = scale.eps.powi(d as i32);
    let g_fast = scale.g_as_fast(&grid)?;

    let mut value = Field::tensor(grid);

    // Solution part: (g + grad Z) ⊗ grad v.
    let flux = transpose_deviation_flux(a, abar, &g_fast);
    let (z, _) = krylov::solve_divergence_form(spectral, a, &flux, tol, true)?;
    let mut lhs = operators::centered_grad(&z);
    lhs.axpy(1.0, &g_fast);
    let gv = operators::centered_grad(v);
    add_outer(&mut value, &lhs, &gv, None, weight);

    // Corrector part: -(g d_i ubar + grad Y_i) ⊗ (grad phi_i + e_i).
    for i in 0..d {
        let mut gp = Field::vector(grid);
        let pi = scale.ubar_grad.comp(i);
        for j in 0..d {
            let gj = g_fast.comp(j);
            let dst = gp.comp_mut(j);
            for idx in 0..vol {
                dst[idx] = gj[idx] * pi[idx];
            }
        }
        let flux = transpose_deviation_flux(a, abar, &gp);
        let (y_i, _) = krylov::solve_divergence_form(spectral, a, &flux, tol, true)?;
        let mut lhs = operators::centered_grad(&y_i);
        lhs.axpy(1.0, &gp);
        let gphi = operators::centered_grad(&set.phi[i]);
        add_outer(&mut value, &lhs, &gphi, Some(i), -weight);
    }
    Ok(DerivativeField { value })
}

/// Which functional the finite-difference check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckedFunctional {
    J0,
    E,
}

/// Central difference quotient `(X(a+tb) - X(a-tb)) / 2t`, computed through
/// difference solves so the quotient stays accurate for small t. All
/// centerings, `abar`, and the slow fields are held fixed.
#[allow(clippy::too_many_arguments)]
pub fn directional_derivative_fd(
    spectral: &Spectral,
    kind: CheckedFunctional,
    a: &Field,
    set: &CorrectorSet,
    abar: &[f64],
    scale: &ScaleFields,
    v: &Field,
    p: &Perturbation,
    t: f64,
    tol: f64,
    lambda_floor: f64,
) -> Result<f64> {
    p.validate()?;
    if p.b.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let plus = functional_delta(spectral, kind, a, set, abar, scale, v, p, t, tol, lambda_floor)?;
    let minus =
        functional_delta(spectral, kind, a, set, abar, scale, v, p, -t, tol, lambda_floor)?;
    Ok((plus - minus) / (2.0 * t))
}

/// `X(a + t b) - X(a)` evaluated exactly from the difference fields.
#[allow(clippy::too_many_arguments)]
fn functional_delta(
    spectral: &Spectral,
    kind: CheckedFunctional,
    a: &Field,
    set: &CorrectorSet,
    abar: &[f64],
    scale: &ScaleFields,
    v: &Field,
    p: &Perturbation,
    t: f64,
    tol: f64,
    lambda_floor: f64,
) -> Result<f64> {
    let grid = spectral.grid;
    let d = grid.dim();
    let vol = grid.vol();
    let mut perturbed = a.clone();
    for &idx in &p.support {
        for c in 0..d * d {
            let val = perturbed.at(c, idx) + t * p.b.at(c, idx);
            perturbed.set(c, idx, val);
        }
    }
    let mut cell = vec![0.0; d * d];
    for &idx in &p.support {
        for c in 0..d * d {
            cell[c] = perturbed.at(c, idx);
        }
        if matrix::operator_norm(&cell, d) > 1.0 + 1e-12
            || matrix::min_sym_eigenvalue(&cell, d) < lambda_floor
        {
            return Err(Error::Admissibility {
                cell: idx,
                detail: format!("perturbation of size {t} leaves the admissible class"),
            });
        }
    }

    let weight = functionals::jacobian_weight(&grid, scale.eps);
    match kind {
        CheckedFunctional::J0 => {
            let f_fast = scale.big_f_as_fast(&grid)?;
            let mut delta = 0.0;
            for i in 0..d {
                let gphi = operators::centered_grad(&set.phi[i]);
                let rhs = scaled_matvec(&p.b, &gphi, Some(i), t);
                let (dphi, _) =
                    krylov::solve_divergence_form(spectral, &perturbed, &rhs, tol, false)?;
                let gdphi = operators::centered_grad(&dphi);
                for j in 0..d {
                    let fj = f_fast.comp(i * d + j);
                    for idx in 0..vol {
                        let mut dxi = 0.0;
                        for m in 0..d {
                            let unit = if m == i { 1.0 } else { 0.0 };
                            dxi += t
                                * p.b.at(j * d + m, idx)
                                * (gphi.at(m, idx) + gdphi.at(m, idx) + unit);
                            dxi += (a.at(j * d + m, idx) - abar[j * d + m]) * gdphi.at(m, idx);
                        }
                        delta += fj[idx] * dxi;
                    }
                }
            }
            Ok(delta * weight)
        }
        CheckedFunctional::E => {
            let g_fast = scale.g_as_fast(&grid)?;
            let gv = operators::centered_grad(v);
            let rhs = scaled_matvec(&p.b, &gv, None, t);
            let (dv, _) = krylov::solve_divergence_form(spectral, &perturbed, &rhs, tol, false)?;
            let gdv = operators::centered_grad(&dv);
            let mut delta = 0.0;
            for j in 0..d {
                let gj = g_fast.comp(j);
                for idx in 0..vol {
                    let mut dx = 0.0;
                    for m in 0..d {
                        dx += t * p.b.at(j * d + m, idx) * (gv.at(m, idx) + gdv.at(m, idx));
                        dx += (a.at(j * d + m, idx) - abar[j * d + m]) * gdv.at(m, idx);
                    }
                    delta += gj[idx] * dx;
                }
            }
            for i in 0..d {
                let gphi = operators::centered_grad(&set.phi[i]);
                let rhs = scaled_matvec(&p.b, &gphi, Some(i), t);
                let (dphi, _) =
                    krylov::solve_divergence_form(spectral, &perturbed, &rhs, tol, false)?;
                let gdphi = operators::centered_grad(&dphi);
                let pi = scale.ubar_grad.comp(i);
                for j in 0..d {
                    let gj = g_fast.comp(j);
                    for idx in 0..vol {
                        let mut dxi = 0.0;
                        for m in 0..d {
                            let unit = if m == i { 1.0 } else { 0.0 };
                            dxi += t
                                * p.b.at(j * d + m, idx)
                                * (gphi.at(m, idx) + gdphi.at(m, idx) + unit);
                            dxi += (a.at(j * d + m, idx) - abar[j * d + m]) * gdphi.at(m, idx);
                        }
                        delta -= gj[idx] * pi[idx] * dxi;
                    }
                }
            }
            Ok(delta * weight)
        }
    }
}

/// `t * b (G u [+ e_i])` as a flux.
fn scaled_matvec(b: &Field, gu: &Field, unit: Option<usize>, t: f64) -> Field {
    let grid = *b.grid();
    let d = grid.dim();
    let vol = grid.vol();
    let mut out = Field::vector(grid);
    for l in 0..d {
        let dst = out.comp_mut(l);
        for m in 0..d {
            let u = match unit {
                Some(i) if m == i => 1.0,
                _ => 0.0,
            };
            let bc = b.comp(l * d + m);
            let gm = gu.comp(m);
            for idx in 0..vol {
                dst[idx] += t * bc[idx] * (gm[idx] + u);
            }
        }
    }
    out
}

/// Discrete weighted norm of a tensor field: dyadic ball integrals by box
/// filters, truncated at the torus half-width. `simplified` keeps only the
/// unit scale (valid for beta > d).
pub fn weighted_norm_beta(field: &Field, beta: f64, simplified: bool) -> f64 {
    let grid = *field.grid();
    let vol = grid.vol();
    let h = grid.spacing();
    let mut absf = vec![0.0; vol];
    for idx in 0..vol {
        let mut s = 0.0;
        for c in 0..field.comps() {
            let v = field.at(c, idx);
            s += v * v;
        }
        absf[idx] = s.sqrt();
    }
    let cell = grid.cell_volume();
    let mut total = 0.0;
    let mut k = 0u32;
    loop {
        let radius = (1u64 << k) as f64;
        if radius > grid.extent() / 2.0 {
            break;
        }
        let rc = (radius / h).round() as usize;
        let filtered = box_filter(&grid, &absf, rc);
        let sum_sq: f64 =
            crate::stats::kahan_sum(filtered.iter().map(|v| (v * cell) * (v * cell)));
        total += 2f64.powf(-beta * k as f64) * sum_sq * cell;
        if simplified {
            break;
        }
        k += 1;
    }
    total.sqrt()
}

/// Separable periodic box filter: sum over the cube `|y - z|_inf <= rc` cells.
fn box_filter(grid: &TorusGrid, data: &[f64], rc: usize) -> Vec<f64> {
    let n = grid.n();
    let vol = grid.vol();
    let mut cur = data.to_vec();
    let mut next = vec![0.0; vol];
    for axis in 0..grid.dim() {
        let stride = grid.stride(axis);
        let block = stride * n;
        if 2 * rc + 1 >= n {
            // window covers the whole line
            for base in (0..vol).step_by(block) {
                for inner in 0..stride {
                    let start = base + inner;
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += cur[start + j * stride];
                    }
                    for j in 0..n {
                        next[start + j * stride] = acc;
                    }
                }
            }
        } else {
            for base in (0..vol).step_by(block) {
                for inner in 0..stride {
                    let start = base + inner;
                    let mut acc = 0.0;
                    for j in 0..=2 * rc {
                        let jj = (j + n - rc) % n;
                        acc += cur[start + jj * stride];
                    }
                    for j in 0..n {
                        next[start + j * stride] = acc;
                        let leave = (j + n - rc) % n;
                        let enter = (j + rc + 1) % n;
                        acc += cur[start + enter * stride] - cur[start + leave * stride];
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Verdict of one derivative check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub functional: CheckedFunctional,
    pub pairing: f64,
    /// (t, central quotient) per ladder step plus the target step.
    pub quotients: Vec<(f64, f64)>,
    pub max_rel_error: f64,
    pub richardson_slope: f64,
    pub pass: bool,
}

/// Step ladder for the Richardson slope; kept above rounding noise at the
/// grid sizes the checks run on.
pub const T_LADDER: [f64; 3] = [1e-3, 5e-4, 2.5e-4];

/// Compare the derivative pairing against central quotients over the ladder
/// plus the target step, and fit the order of the quotient error.
#[allow(clippy::too_many_arguments)]
pub fn run_derivative_check(
    spectral: &Spectral,
    kind: CheckedFunctional,
    a: &Field,
    set: &CorrectorSet,
    abar: &[f64],
    scale: &ScaleFields,
    v: &Field,
    p: &Perturbation,
    t_target: f64,
    tol: f64,
    lambda_floor: f64,
) -> Result<DerivativeCheck> {
    let derivative = match kind {
        CheckedFunctional::J0 => functional_derivative_j0(spectral, a, set, abar, scale, tol)?,
        CheckedFunctional::E => {
            functional_derivative_e(spectral, a, set, abar, scale, v, tol)?
        }
    };
    let pairing = derivative.pair(p);
    let mut quotients = Vec::new();
    let mut errors = Vec::new();
    for &t in T_LADDER.iter() {
        let q = directional_derivative_fd(
            spectral, kind, a, set, abar, scale, v, p, t, tol, lambda_floor,
        )?;
        quotients.push((t, q));
        errors.push((q - pairing).abs());
    }
    let q_target = directional_derivative_fd(
        spectral, kind, a, set, abar, scale, v, p, t_target, tol, lambda_floor,
    )?;
    quotients.push((t_target, q_target));
    let denom = pairing.abs().max(1e-300);
    let max_rel_error = (q_target - pairing).abs() / denom;

    let floor = 1e-12 * denom;
    let slope = if errors.iter().all(|e| *e > floor) {
        let s1 = (errors[0] / errors[1]).log2();
        let s2 = (errors[1] / errors[2]).log2();
        (s1 + s2) / 2.0
    } else {
        2.0 // below the noise floor everywhere: indistinguishable from exact
    };
    Ok(DerivativeCheck {
        functional: kind,
        pairing,
        quotients,
        max_rel_error,
        richardson_slope: slope,
        pass: max_rel_error <= 1e-5 && (slope - 2.0).abs() <= 0.2,
    })
}
