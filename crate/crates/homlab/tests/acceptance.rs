//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//! Tolerances and thresholds are pinned in code.

use homlab::corrector::{self, build_corrector_set, sigma_entry};
use homlab::derivative::{self, CheckedFunctional, Perturbation};
use homlab::ensemble::{self, EnsembleConfig, ScalingReport, SweepResult};
use homlab::functionals::{self, JKind};
use homlab::gaussian::{self, CovarianceSpec, GaussianField, LinkKind};
use homlab::grid::{inner, Field, TorusGrid};
use homlab::krylov;
use homlab::matrix;
use homlab::operators::{self, OperatorWorkspace, Spectral};
use homlab::testfn::{BumpKind, BumpSpec, TestFunctionSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

fn pass(id: &str, label: &str, detail: &str) {
    println!("[{id} {label}] PASS — {detail}");
}

fn random_scalar(grid: TorusGrid, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Field::scalar(grid);
    for v in f.comp_mut(0) {
        *v = rng.gen_range(-1.0..1.0);
    }
    f
}

fn random_vector(grid: TorusGrid, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Field::vector(grid);
    for c in 0..grid.dim() {
        for v in f.comp_mut(c) {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    f
}

fn random_admissible(grid: TorusGrid, seed: u64, link: LinkKind) -> Field {
    let spec = CovarianceSpec::new(4.0, 1.0, grid.dim(), link).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chans: Vec<GaussianField> = (0..link.channels(grid.dim()))
        .map(|_| {
            let mut f = Field::scalar(grid);
            for v in f.comp_mut(0) {
                *v = rng.gen_range(-2.0..2.0);
            }
            GaussianField { field: f, seed, clipped_mass: 0.0 }
        })
        .collect();
    gaussian::apply_link(&spec, &chans).unwrap()
}

fn center_bumps(
    dim: usize,
    slow_extent: f64,
    radius: f64,
) -> (TestFunctionSpec, TestFunctionSpec, TestFunctionSpec) {
    let mk = BumpSpec {
        kind: BumpKind::SmoothBump,
        center: vec![slow_extent / 2.0; dim],
        radius,
        amplitude: 1.0,
    };
    (
        TestFunctionSpec::vector_bump(dim, 0, mk.clone()),
        TestFunctionSpec::vector_bump(dim, dim - 1, mk.clone()),
        TestFunctionSpec::tensor_bump(dim, 0, 0, mk),
    )
}

#[test]
fn a01_constant_coefficient_degeneracy() {
    let started = Instant::now();
    let grid = TorusGrid::new(2, 16.0, 64).unwrap();
    let sp = Spectral::new(grid);
    let m = vec![0.7, 0.1, -0.1, 0.6];
    let a = gaussian::constant_coefficient(grid, &m);
    let set = build_corrector_set(&sp, &a, 1e-11, false).unwrap();
    let abar_err: f64 = set
        .abar
        .iter()
        .zip(&m)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(abar_err <= 1e-10, "abar error {abar_err}");
    let xi = functionals::commutator_field(&a, &set.phi, &set.abar);
    assert!(xi.max_abs() <= 1e-10, "commutator max {}", xi.max_abs());

    let eps = 0.5;
    let (f, g, big_f) = center_bumps(2, eps * grid.extent(), 1.0);
    let scale = functionals::prepare_scale(&grid, &set.abar, &f, &g, &big_f, eps).unwrap();
    let (v, _) = functionals::solve_heterogeneous(&sp, &a, &scale, 1e-11).unwrap();
    let zero = Field::vector(grid);
    let e_val =
        functionals::eval_e(&scale, &grid, &a, &v, &xi, &set.abar, Some(&zero)).unwrap();
    assert!(e_val.abs() <= 1e-8, "E = {e_val}");
    let dt = started.elapsed().as_secs_f64();
    assert!(dt < 1.0, "runtime {dt:.2}s exceeds 1s");
    pass(
        "A01",
        "constant-coefficient degeneracy",
        &format!("abar err {abar_err:.1e}, |Xi| {:.1e}, |E| {:.1e}, {dt:.2}s", xi.max_abs(), e_val.abs()),
    );
}

#[test]
fn a02_one_dimensional_harmonic_mean() {
    let started = Instant::now();
    let l = 16.0;
    // a derivative kink keeps the refinement error algebraic and observable
    let a_fn = |x: f64| 0.6 + 0.3 * (std::f64::consts::PI * x / l).sin().abs();
    // independent oracle: dense midpoint quadrature of the harmonic mean
    let cells = 1usize << 22;
    let hq = l / cells as f64;
    let mut inv = 0.0;
    for i in 0..cells {
        inv += 1.0 / a_fn((i as f64 + 0.5) * hq);
    }
    let exact = cells as f64 / inv;
    let mut errs = Vec::new();
    for n in [1024usize, 2048, 4096] {
        let grid = TorusGrid::new(1, l, n).unwrap();
        let sp = Spectral::new(grid);
        let mut a = Field::zeros(grid, 1);
        for idx in 0..grid.vol() {
            a.set(0, idx, a_fn(grid.position(idx)[0]));
        }
        let set = build_corrector_set(&sp, &a, 1e-12, false).unwrap();
        errs.push((set.abar[0] - exact).abs() / exact);
    }
    assert!(errs[2] <= 1e-4, "relative error {} at N=4096", errs[2]);
    assert!(
        errs[0] > errs[1] && errs[1] > errs[2],
        "errors not monotone: {errs:?}"
    );
    let dt = started.elapsed().as_secs_f64();
    assert!(dt < 5.0, "runtime {dt:.2}s exceeds 5s");
    pass(
        "A02",
        "1-D harmonic-mean oracle",
        &format!("errors {errs:?} decreasing, {dt:.2}s"),
    );
}

#[test]
fn a03_laminate_oracle() {
    let started = Instant::now();
    let l = 16.0;
    let grid = TorusGrid::new(2, l, 256).unwrap();
    let sp = Spectral::new(grid);
    let alpha = |x: f64| 0.55 + 0.45 * (2.0 * std::f64::consts::PI * x / l).sin();
    let mut a = Field::zeros(grid, 4);
    for idx in 0..grid.vol() {
        let x = grid.position(idx)[0];
        a.set(0, idx, alpha(x));
        a.set(3, idx, alpha(x));
    }
    let set = build_corrector_set(&sp, &a, 1e-11, false).unwrap();
    // quadrature oracle for the two means
    let cells = 1 << 20;
    let hq = l / cells as f64;
    let (mut inv, mut avg) = (0.0, 0.0);
    for i in 0..cells {
        let x = (i as f64 + 0.5) * hq;
        inv += 1.0 / alpha(x);
        avg += alpha(x);
    }
    let harm = cells as f64 / inv;
    let arith = avg / cells as f64;
    let err_h = (set.abar[0] - harm).abs() / harm;
    let err_a = (set.abar[3] - arith).abs() / arith;
    assert!(err_h <= 1e-3, "harmonic-mean error {err_h}");
    assert!(err_a <= 1e-3, "arithmetic-mean error {err_a}");
    let dt = started.elapsed().as_secs_f64();
    assert!(dt < 30.0, "runtime {dt:.2}s exceeds 30s");
    pass(
        "A03",
        "2-D laminate oracle",
        &format!("harm err {err_h:.1e}, arith err {err_a:.1e}, {dt:.2}s"),
    );
}

#[test]
fn a04_operator_algebra() {
    let grid = TorusGrid::new(2, 8.0, 8).unwrap();
    let lambda = 0.3;
    let a = random_admissible(grid, 4, LinkKind::Nonsymmetric { lambda, kappa: 0.2 });

    // summation by parts
    let mut worst_sbp: f64 = 0.0;
    for seed in 0..20 {
        let u = random_scalar(grid, 1000 + seed);
        let v = random_vector(grid, 2000 + seed);
        worst_sbp = worst_sbp.max((inner(&operators::div(&v), &u) + inner(&v, &operators::grad(&u))).abs());
    }
    assert!(worst_sbp <= 1e-12, "sbp defect {worst_sbp}");

    // adjoint consistency through random inner products
    let mut ws = OperatorWorkspace::new(grid);
    let mut worst_adj: f64 = 0.0;
    let mut au = vec![0.0; grid.vol()];
    let mut atv = vec![0.0; grid.vol()];
    for seed in 0..20 {
        let u = random_scalar(grid, 3000 + seed);
        let v = random_scalar(grid, 4000 + seed);
        operators::apply_operator_into(&a, u.comp(0), false, &mut ws, &mut au);
        operators::apply_operator_into(&a, v.comp(0), true, &mut ws, &mut atv);
        let lhs: f64 = v.comp(0).iter().zip(&au).map(|(x, y)| x * y).sum();
        let rhs: f64 = atv.iter().zip(u.comp(0)).map(|(x, y)| x * y).sum();
        worst_adj = worst_adj.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    assert!(worst_adj <= 1e-12, "adjoint defect {worst_adj}");

    // coercivity on 100 random mean-zero fields
    for seed in 0..100 {
        let mut u = random_scalar(grid, 5000 + seed);
        u.remove_mean();
        let au = operators::apply_operator(&a, &u).unwrap();
        let gu = operators::centered_grad(&u);
        let energy = inner(&u, &au);
        let gnorm2 = inner(&gu, &gu);
        assert!(
            energy >= lambda * gnorm2 - 1e-12,
            "coercivity violated: {energy} < {}",
            lambda * gnorm2
        );
    }

    // Krylov against dense LU on the 8x8 grid
    let sp = Spectral::new(grid);
    let w = random_vector(grid, 6000);
    let tol = 1e-11;
    let (u, rep) = krylov::solve_divergence_form(&sp, &a, &w, tol, false).unwrap();
    assert!(rep.converged);
    let vol = grid.vol();
    let mut dense = nalgebra::DMatrix::<f64>::zeros(vol, vol);
    let mut e = vec![0.0; vol];
    let mut col = vec![0.0; vol];
    for j in 0..vol {
        e.fill(0.0);
        e[j] = 1.0;
        operators::apply_operator_into(&a, &e, false, &mut ws, &mut col);
        for i in 0..vol {
            dense[(i, j)] = col[i];
        }
    }
    // pin the four gauge modes with rank-one shifts
    for mask in 0..4usize {
        let mut chi = vec![0.0; vol];
        for idx in 0..vol {
            let c = grid.coords(idx);
            let mut parity = 0;
            if mask & 1 != 0 {
                parity ^= c[1] & 1;
            }
            if mask & 2 != 0 {
                parity ^= c[0] & 1;
            }
            chi[idx] = if parity == 0 { 1.0 } else { -1.0 };
        }
        for i in 0..vol {
            for j in 0..vol {
                dense[(i, j)] += chi[i] * chi[j] / vol as f64;
            }
        }
    }
    let b = operators::flux_divergence(&w);
    let rhs = nalgebra::DVector::<f64>::from_column_slice(b.comp(0));
    let xd = nalgebra::LU::new(dense).solve(&rhs).unwrap();
    let scale = u.max_abs().max(1e-30);
    let mut worst_lu: f64 = 0.0;
    for idx in 0..vol {
        worst_lu = worst_lu.max((u.at(0, idx) - xd[idx]).abs() / scale);
    }
    assert!(worst_lu <= 10.0 * tol, "dense mismatch {worst_lu}");
    pass(
        "A04",
        "operator algebra",
        &format!("sbp {worst_sbp:.1e}, adjoint {worst_adj:.1e}, coercivity on 100 fields, LU gap {worst_lu:.1e}"),
    );
}

#[test]
fn a05_extended_corrector_identities() {
    let started = Instant::now();
    let grid = TorusGrid::new(2, 16.0, 256).unwrap();
    let sp = Spectral::new(grid);
    let lambda = 0.25;
    let spec = CovarianceSpec::new(4.0, 1.0, 2, LinkKind::ScalarSigmoid { lambda }).unwrap();
    let chan =
        gaussian::synthesize_gaussian(&spec, &grid, &sp.fft, 55, 0, 0, gaussian::DEFAULT_CLIP_TOL)
            .unwrap();
    let a = gaussian::apply_link(&spec, &[chan]).unwrap();
    let set = build_corrector_set(&sp, &a, 1e-12, false).unwrap();
    for i in 0..2 {
        for idx in (0..grid.vol()).step_by(97) {
            let s01 = sigma_entry(&set.sigma[i], 2, 0, 1, idx);
            let s10 = sigma_entry(&set.sigma[i], 2, 1, 0, idx);
            assert_eq!(s01 + s10, 0.0, "skew storage broken");
        }
        let resid = set.diagnostics.flux_potential_residual[i];
        assert!(resid <= 1e-8, "flux-potential residual {resid}");
        let energy = set.diagnostics.gradient_energy[i];
        assert!(
            energy <= (1.0 / (lambda * lambda)) * 1.05,
            "gradient energy {energy}"
        );
    }
    let dt = started.elapsed().as_secs_f64();
    assert!(dt < 60.0, "runtime {dt:.2}s exceeds 1min");
    pass(
        "A05",
        "extended-corrector identities",
        &format!(
            "skew exact, flux-potential residuals {:?}, energies {:?}, {dt:.1}s",
            set.diagnostics.flux_potential_residual, set.diagnostics.gradient_energy
        ),
    );
}

#[test]
fn a06_projection_identities() {
    let grid = TorusGrid::new(2, 16.0, 32).unwrap();
    let sp = Spectral::new(grid);
    let abar = vec![0.8, 0.1, -0.05, 0.6];
    let mut worst_idem: f64 = 0.0;
    let mut worst_leray: f64 = 0.0;
    let mut worst_leray_id: f64 = 0.0;
    for seed in 0..10 {
        let v = random_vector(grid, 7000 + seed);
        let pv = sp.helmholtz_project(&abar, &v, false).unwrap();
        let mut apv = Field::vector(grid);
        for l in 0..2 {
            for idx in 0..grid.vol() {
                apv.set(l, idx, abar[l * 2] * pv.at(0, idx) + abar[l * 2 + 1] * pv.at(1, idx));
            }
        }
        let papv = sp.helmholtz_project(&abar, &apv, false).unwrap();
        let mut gap: f64 = 0.0;
        for c in 0..2 {
            for idx in 0..grid.vol() {
                gap = gap.max((papv.at(c, idx) - pv.at(c, idx)).abs());
            }
        }
        worst_idem = worst_idem.max(gap / pv.max_abs().max(1e-30));

        // the Leray output is divergence-free after the coefficient weighting
        let lv = sp.leray_project(&abar, &v, false).unwrap();
        let mut alv = Field::vector(grid);
        for l in 0..2 {
            for idx in 0..grid.vol() {
                alv.set(l, idx, abar[l * 2] * lv.at(0, idx) + abar[l * 2 + 1] * lv.at(1, idx));
            }
        }
        worst_leray = worst_leray
            .max(operators::flux_divergence(&alv).max_abs() / v.max_abs().max(1e-30));

        // and verbatim divergence-free at the identity matrix
        let id = matrix::identity(2);
        let lv = sp.leray_project(&id, &v, false).unwrap();
        worst_leray_id = worst_leray_id
            .max(operators::flux_divergence(&lv).max_abs() / v.max_abs().max(1e-30));
    }
    assert!(worst_idem <= 1e-10, "idempotence defect {worst_idem}");
    assert!(worst_leray <= 1e-10, "Leray defect {worst_leray}");
    assert!(worst_leray_id <= 1e-10, "identity Leray defect {worst_leray_id}");
    pass(
        "A06",
        "projection identities",
        &format!("P_H a P_H gap {worst_idem:.1e}, div defects {worst_leray:.1e}/{worst_leray_id:.1e}"),
    );
}

#[test]
fn a07_recovery_identities() {
    let started = Instant::now();
    let mut details = String::new();
    for link in [
        LinkKind::ScalarSigmoid { lambda: 0.25 },
        LinkKind::Nonsymmetric { lambda: 0.25, kappa: 0.3 },
    ] {
        let grid = TorusGrid::new(2, 16.0, 64).unwrap();
        let sp = Spectral::new(grid);
        let tol = 1e-11;
        let spec = CovarianceSpec::new(4.0, 1.0, 2, link).unwrap();
        let mut pairs = Vec::new();
        let mut abar = vec![0.0; 4];
        for k in 0..2u64 {
            let chans: Vec<GaussianField> = (0..link.channels(2))
                .map(|c| {
                    gaussian::synthesize_gaussian(
                        &spec,
                        &grid,
                        &sp.fft,
                        77,
                        k,
                        c as u64,
                        gaussian::DEFAULT_CLIP_TOL,
                    )
                    .unwrap()
                })
                .collect();
            let a = gaussian::apply_link(&spec, &chans).unwrap();
            let set = build_corrector_set(&sp, &a, tol, false).unwrap();
            for c in 0..4 {
                abar[c] += set.abar[c] / 2.0;
            }
            pairs.push((a, set));
        }
        let eps = 0.5;
        let (f, g, big_f) = center_bumps(2, eps * grid.extent(), 1.0);
        let scale = functionals::prepare_scale(&grid, &abar, &f, &g, &big_f, eps).unwrap();
        let realizations: Vec<functionals::Realization> = pairs
            .into_iter()
            .map(|(a, set)| {
                let (v, _) = functionals::solve_heterogeneous(&sp, &a, &scale, tol).unwrap();
                let xi = functionals::commutator_field(&a, &set.phi, &abar);
                functionals::Realization { a, set, v, xi }
            })
            .collect();
        let reports = functionals::identity_checks(&sp, &realizations, &abar, &scale).unwrap();
        let worst = reports
            .iter()
            .map(|r| r.i1.max(r.i2).max(r.j1).max(r.j2))
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-6, "identity residual {worst} for {link:?}");
        details.push_str(&format!("{link:?}: {worst:.1e}; "));
    }
    let dt = started.elapsed().as_secs_f64();
    pass("A07", "recovery identities", &format!("{details}{dt:.1}s"));
}

#[test]
fn a08_representation_formulas() {
    let started = Instant::now();
    let grid = TorusGrid::new(2, 16.0, 32).unwrap();
    let sp = Spectral::new(grid);
    let a = random_admissible(grid, 88, LinkKind::ScalarSigmoid { lambda: 0.25 });
    let set = build_corrector_set(&sp, &a, 1e-12, false).unwrap();
    let eps = 0.5;
    let (f, g, big_f) = center_bumps(2, eps * grid.extent(), 1.0);
    let scale = functionals::prepare_scale(&grid, &set.abar, &f, &g, &big_f, eps).unwrap();
    let (v, _) = functionals::solve_heterogeneous(&sp, &a, &scale, 1e-12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(880);
    let mut details = String::new();
    for p_idx in 0..5 {
        let cell = rng.gen_range(0..grid.vol());
        let entries: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = Perturbation::single_cell_symmetric(grid, cell, 0.1, &entries).unwrap();
        for kind in [CheckedFunctional::J0, CheckedFunctional::E] {
            let check = derivative::run_derivative_check(
                &sp, kind, &a, &set, &set.abar, &scale, &v, &p, 1e-4, 1e-12, 0.0,
            )
            .unwrap();
            assert!(
                check.max_rel_error <= 1e-5,
                "perturbation {p_idx} {kind:?}: rel error {}",
                check.max_rel_error
            );
            assert!(
                (check.richardson_slope - 2.0).abs() <= 0.2,
                "perturbation {p_idx} {kind:?}: slope {}",
                check.richardson_slope
            );
            if p_idx == 0 {
                details.push_str(&format!(
                    "{kind:?}: err {:.1e}, slope {:.2}; ",
                    check.max_rel_error, check.richardson_slope
                ));
            }
        }
    }
    let dt = started.elapsed().as_secs_f64();
    assert!(dt < 120.0, "runtime {dt:.1}s exceeds 2min");
    pass(
        "A08",
        "representation formulas",
        &format!("5 perturbations x (J0, E): {details}{dt:.1}s"),
    );
}

fn sweep_config(beta: f64, seed: u64, solution: bool) -> EnsembleConfig {
    EnsembleConfig {
        master_seed: seed,
        n_samples: 256,
        dim: 2,
        n: 512,
        extent: 64.0,
        beta,
        c0: 1.0,
        link: LinkKind::ScalarSigmoid { lambda: 0.25 },
        eps_list: vec![0.5, 0.25, 0.125, 0.0625],
        tol: 1e-8,
        solution_functionals: solution,
        radius: 1.0,
        pilot_samples: 16,
        ..EnsembleConfig::default()
    }
}

static BETA4: OnceLock<(SweepResult, ScalingReport, f64)> = OnceLock::new();

fn beta4_sweep() -> &'static (SweepResult, ScalingReport, f64) {
    BETA4.get_or_init(|| {
        let started = Instant::now();
        let cfg = sweep_config(4.0, 104, true);
        let result = ensemble::run_sweep(&cfg).expect("beta=4 sweep");
        let report = ensemble::analyze(&result).expect("analyze");
        (result, report, started.elapsed().as_secs_f64())
    })
}

#[test]
fn a09_fluctuation_scaling() {
    // beta = 1: long-range regime, commutator functionals only.
    let started = Instant::now();
    let cfg1 = sweep_config(1.0, 101, false);
    let result1 = ensemble::run_sweep(&cfg1).expect("beta=1 sweep");
    let report1 = ensemble::analyze(&result1).expect("analyze");
    let dt1 = started.elapsed().as_secs_f64();
    assert!(dt1 <= 900.0, "beta=1 sweep took {dt1:.0}s");

    let (_, report4, dt4) = beta4_sweep();
    assert!(*dt4 <= 900.0, "beta=4 sweep took {dt4:.0}s");

    for (label, report) in [("beta=1", &report1), ("beta=4", report4)] {
        let raw = report.var_j0_fit.slope;
        let hat = report.var_j0_hat_fit.slope;
        let predicted = report.predicted_var_slope;
        // The raw and hatted fits are algebraically linked through pi*.
        assert!(
            report.hat_link_defect <= 1e-10,
            "{label}: hat link defect {}",
            report.hat_link_defect
        );
        assert!(
            (raw - predicted).abs() <= 0.35,
            "{label}: raw Var J0 slope {raw:.3} outside {predicted} +- 0.35"
        );
        assert!(
            hat.abs() <= 0.35,
            "{label}: rescaled slope {hat:.3} outside 0 +- 0.35"
        );
        println!(
            "  {label}: raw slope {raw:+.3} (predicted {predicted:+.1}), rescaled {hat:+.3}"
        );
    }
    pass(
        "A09",
        "fluctuation scaling",
        &format!(
            "beta=1 slope {:+.3}, beta=4 slope {:+.3}; rescaled {:+.3}/{:+.3}; {dt1:.0}s + {dt4:.0}s",
            report1.var_j0_fit.slope,
            report4.var_j0_fit.slope,
            report1.var_j0_hat_fit.slope,
            report4.var_j0_hat_fit.slope
        ),
    );
}

#[test]
fn a10_pathwise_subdominance() {
    let (_, report, dt) = beta4_sweep();
    assert!(*dt <= 900.0, "beta=4 sweep took {dt:.0}s");
    let e_fit = report.e_hat_fit.as_ref().expect("E-hat fit");
    assert!(
        e_fit.slope >= 0.6,
        "rescaled two-scale error decay slope {:.3} below 0.6",
        e_fit.slope
    );
    let j_fit = report.j0_hat_fit.as_ref().expect("J0-hat fit");
    assert!(
        j_fit.slope.abs() <= 0.35,
        "rescaled commutator moment slope {:.3} outside 0 +- 0.35",
        j_fit.slope
    );
    let (e_upper, j_lower) = report.smallest_eps_separation.expect("separation");
    assert!(
        e_upper < j_lower,
        "no CI separation at the smallest eps: {e_upper:.3e} vs {j_lower:.3e}"
    );
    pass(
        "A10",
        "pathwise subdominance",
        &format!(
            "E-hat decay {:+.3} (>= 0.6), J0-hat slope {:+.3}, CI separation {:.2e} < {:.2e}, {dt:.0}s",
            e_fit.slope, j_fit.slope, e_upper, j_lower
        ),
    );
}

#[test]
fn a11_covariance_fidelity() {
    let grid = TorusGrid::new(2, 16.0, 64).unwrap();
    let fft = homlab::fft::NdFft::new(&grid);
    let mut details = String::new();
    for beta in [1.0, 4.0] {
        let spec =
            CovarianceSpec::new(beta, 1.0, 2, LinkKind::ScalarSigmoid { lambda: 0.25 }).unwrap();
        let fields: Vec<Field> = (0..128)
            .map(|k| {
                gaussian::synthesize_gaussian(
                    &spec,
                    &grid,
                    &fft,
                    2024,
                    k,
                    0,
                    gaussian::DEFAULT_CLIP_TOL,
                )
                .unwrap()
                .field
            })
            .collect();
        let rows =
            gaussian::empirical_radial_covariance(&spec, &grid, &fft, &fields, grid.extent() / 8.0);
        assert!(rows.len() >= 3, "too few radial bins");
        let mut worst: f64 = 0.0;
        for (r, est, ker) in rows {
            let rel = (est - ker).abs() / ker;
            assert!(rel <= 0.10, "beta {beta} lag {r}: {est:.4} vs {ker:.4}");
            worst = worst.max(rel);
        }
        details.push_str(&format!("beta {beta}: worst {worst:.3}; "));
    }
    pass("A11", "covariance fidelity", &details);
}

#[test]
fn a12_scaling_function_branches() {
    let cases_pi = [
        (3.0, 1.0, 2, 4.0),
        (0.0, 2.0, 2, 1.0 / 2.0f64.ln()),
        (7.0, 5.0, 2, 64.0),
    ];
    for (t, beta, d, expect) in cases_pi {
        let got = functionals::pi_star(t, beta, d);
        assert!(
            (got - expect).abs() <= 1e-12 * expect.abs(),
            "pi*({t}; {beta}, {d}) = {got}, expected {expect}"
        );
    }
    let cases_mu = [
        (123.0, 4.0, 3, 1.0),
        (0.0, 2.0, 2, 2.0f64.ln()),
        (3.0, 1.0, 2, 2.0),
    ];
    for (r, beta, d, expect) in cases_mu {
        let got = functionals::mu_star(r, beta, d);
        assert!(
            (got - expect).abs() <= 1e-12 * expect.abs(),
            "mu*({r}; {beta}, {d}) = {got}, expected {expect}"
        );
    }
    pass("A12", "pi*/mu* branch values", "all six printed values match");
}

#[test]
fn a13_determinism_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let fields_dir = dir.path().join("fields");
    let cfg = EnsembleConfig {
        master_seed: 13,
        n_samples: 8,
        dim: 2,
        n: 64,
        extent: 32.0,
        beta: 4.0,
        eps_list: vec![0.5, 0.25, 0.125],
        tol: 1e-10,
        save_fields: true,
        radius: 1.0,
        pilot_samples: 4,
        ..EnsembleConfig::default()
    };
    let result = ensemble::run_sweep_with_fields(&cfg, Some(&fields_dir)).unwrap();
    let csv = ensemble::samples_to_csv(cfg.beta, &result.samples);
    let result2 = ensemble::run_sweep(&cfg).unwrap();
    let csv2 = ensemble::samples_to_csv(cfg.beta, &result2.samples);
    assert_eq!(csv, csv2, "CSV must be byte-identical across reruns");

    // Statistic recomputation from the persisted CSV matches the report.
    let report = ensemble::analyze(&result).unwrap();
    let parsed = ensemble::samples_from_csv(&csv).unwrap();
    let replay = SweepResult {
        samples: parsed,
        ..result.clone()
    };
    let report2 = ensemble::analyze(&replay).unwrap();
    assert!(
        (report.var_j0_fit.slope - report2.var_j0_fit.slope).abs() <= 1e-12,
        "slope changed under CSV replay"
    );
    for (a, b) in report.per_eps.iter().zip(&report2.per_eps) {
        assert!(
            (a.j0_raw.variance.value - b.j0_raw.variance.value).abs()
                <= 1e-12 * a.j0_raw.variance.value.abs().max(1e-30)
        );
    }

    // Full replay from the persisted fields: every functional recomputed
    // directly must match the CSV rows.
    let grid = cfg.grid().unwrap();
    let abar_run = &result.abar_run;
    let n = cfg.n_samples;
    let mut scales = Vec::new();
    for &eps in &cfg.eps_list {
        let (f, g, big_f) = cfg.test_functions_at(eps);
        scales.push(functionals::prepare_scale(&grid, &result.abar, &f, &g, &big_f, eps).unwrap());
    }
    let loaded: Vec<(Field, Vec<Field>, Vec<Field>)> = (0..n)
        .map(|k| {
            let a = homlab::hgfd::read_file(&fields_dir.join(format!("a_{k:04}.hgfd")), cfg.extent)
                .unwrap();
            let phi: Vec<Field> = (0..2)
                .map(|i| {
                    homlab::hgfd::read_file(
                        &fields_dir.join(format!("phi{i}_{k:04}.hgfd")),
                        cfg.extent,
                    )
                    .unwrap()
                })
                .collect();
            let vs: Vec<Field> = (0..cfg.eps_list.len())
                .map(|e| {
                    homlab::hgfd::read_file(
                        &fields_dir.join(format!("v_e{e}_{k:04}.hgfd")),
                        cfg.extent,
                    )
                    .unwrap()
                })
                .collect();
            (a, phi, vs)
        })
        .collect();
    for (e_idx, scale) in scales.iter().enumerate() {
        let eps = cfg.eps_list[e_idx];
        let w = functionals::jacobian_weight(&grid, eps);
        // ensemble centerings recomputed from fields
        let mut grads = Vec::new();
        let mut fluxes = Vec::new();
        let mut xis = Vec::new();
        for (a, phi, vs) in &loaded {
            let gv = operators::centered_grad(&vs[e_idx]);
            let mut flux = Field::vector(grid);
            operators::coeff_apply(a, &gv, false, &mut flux);
            grads.push(gv);
            fluxes.push(flux);
            xis.push(functionals::commutator_field(a, phi, abar_run));
        }
        let g_fast = scale.g_as_fast(&grid).unwrap();
        let mean_of = |vals: &[f64]| vals.iter().sum::<f64>() / n as f64;
        let u_pairs: Vec<f64> = grads.iter().map(|gv| functionals::contract(&g_fast, gv, w)).collect();
        let f_pairs: Vec<f64> =
            fluxes.iter().map(|fl| functionals::contract(&g_fast, fl, w)).collect();
        let c_pairs: Vec<f64> = fluxes
            .iter()
            .zip(&grads)
            .map(|(fl, gv)| {
                let mut x = fl.clone();
                for j in 0..2 {
                    for m in 0..2 {
                        let am = abar_run[j * 2 + m];
                        let gm: Vec<f64> = gv.comp(m).to_vec();
                        let dst = x.comp_mut(j);
                        for idx in 0..grid.vol() {
                            dst[idx] -= am * gm[idx];
                        }
                    }
                }
                functionals::contract(&g_fast, &x, w)
            })
            .collect();
        let x_terms: Vec<f64> = xis
            .iter()
            .map(|xi| {
                let mut s = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        let xij = xi.comp(i * 2 + j);
                        let gj = scale.g.comp(j);
                        let pi = scale.ubar_grad.comp(i);
                        s += (0..grid.vol()).map(|idx| gj[idx] * xij[idx] * pi[idx]).sum::<f64>();
                    }
                }
                s * w
            })
            .collect();
        let (u_mean, f_mean, c_mean, x_mean) = (
            mean_of(&u_pairs),
            mean_of(&f_pairs),
            mean_of(&c_pairs),
            mean_of(&x_terms),
        );
        for (k, (a, phi, _)) in loaded.iter().enumerate() {
            let row = result
                .samples
                .iter()
                .find(|s| s.sample_index == k && s.eps == eps)
                .unwrap();
            let j0 = functionals::eval_j(JKind::Commutator, scale, &grid, a, phi, abar_run);
            let j1 = functionals::eval_j(JKind::CorrectorGradient, scale, &grid, a, phi, abar_run);
            let j2 = functionals::eval_j(JKind::CorrectorFlux, scale, &grid, a, phi, abar_run);
            let close = |x: f64, y: f64, what: &str| {
                assert!(
                    (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-6),
                    "sample {k} eps {eps} {what}: replay {x} vs csv {y}"
                );
            };
            close(j0, row.j0, "j0");
            close(j1, row.j1, "j1");
            close(j2, row.j2, "j2");
            close(u_pairs[k] - u_mean, row.i1, "i1");
            close(f_pairs[k] - f_mean, row.i2, "i2");
            close(
                (c_pairs[k] - c_mean) - (x_terms[k] - x_mean),
                row.e_val,
                "e",
            );
        }
    }
    // correctors replayed through the solver reproduce the persisted phi
    let sp = Spectral::new(grid);
    let (a0, phi0, _) = &loaded[0];
    let (phi_re, _) = corrector::solve_corrector(&sp, a0, cfg.tol, false).unwrap();
    for i in 0..2 {
        let mut gap: f64 = 0.0;
        for idx in 0..grid.vol() {
            gap = gap.max((phi_re[i].at(0, idx) - phi0[i].at(0, idx)).abs());
        }
        assert!(gap == 0.0, "replayed corrector differs by {gap}");
    }
    pass(
        "A13",
        "determinism and replay",
        "byte-identical CSV; field replay matches all functionals at 1e-12",
    );
}
