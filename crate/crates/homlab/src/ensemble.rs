//! Monte Carlo driver: sweeps realizations and scales, estimates moments
//! with jackknife intervals, and fits the predicted scaling laws.
//!
//! The sweep runs one expensive pass over samples. A small pilot batch fixes
//! the deterministic homogenized matrix first; every per-sample functional is
//! then reduced to a handful of scalars, so the ensemble centerings are exact
//! finite-sample means applied in a closing reduction.

use crate::corrector;
use crate::error::{Error, Result};
use crate::exec;
use crate::functionals::{self, Centering, FunctionalSample, ScaleFields};
use crate::gaussian::{self, CovarianceSpec, LinkKind};
use crate::grid::{Field, TorusGrid};
use crate::operators::{self, Spectral};
use crate::stats::{self, MomentSummary, ScalingFit};
use crate::testfn::{BumpKind, BumpSpec, TestFunctionSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Full description of one sweep; reproducible byte for byte from this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub master_seed: u64,
    pub n_samples: usize,
    pub dim: usize,
    pub n: usize,
    pub extent: f64,
    pub beta: f64,
    pub c0: f64,
    pub link: LinkKind,
    pub eps_list: Vec<f64>,
    pub tol: f64,
    pub clip_tol: f64,
    /// Abort when more than this fraction of samples fail.
    pub fail_threshold: f64,
    /// Solve the heterogeneous problem per eps (needed for I1, I2, E).
    pub solution_functionals: bool,
    /// Persist per-sample fields under `fields/` for replay.
    pub save_fields: bool,
    /// Support radius of the built-in test bumps (slow coordinates).
    pub radius: f64,
    pub amplitude: f64,
    /// Pilot batch size fixing the shared homogenized matrix.
    pub pilot_samples: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            n_samples: 16,
            dim: 2,
            n: 64,
            extent: 16.0,
            beta: 4.0,
            c0: 1.0,
            link: LinkKind::ScalarSigmoid { lambda: 0.25 },
            eps_list: vec![0.5, 0.25],
            tol: 1e-8,
            clip_tol: gaussian::DEFAULT_CLIP_TOL,
            fail_threshold: 0.01,
            solution_functionals: true,
            save_fields: false,
            radius: 1.0,
            amplitude: 1.0,
            pilot_samples: 16,
        }
    }
}

impl EnsembleConfig {
    pub fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.dim, self.extent, self.n)
    }

    pub fn covariance(&self) -> Result<CovarianceSpec> {
        CovarianceSpec::new(self.beta, self.c0, self.dim, self.link)
    }

    /// Built-in test functions at one eps: bumps centered in the slow torus,
    /// f driving component 0, g weighing the last component, F the (0,0)
    /// tensor slot.
    pub fn test_functions_at(
        &self,
        eps: f64,
    ) -> (TestFunctionSpec, TestFunctionSpec, TestFunctionSpec) {
        let bump = |amp: f64| BumpSpec {
            kind: BumpKind::SmoothBump,
            center: vec![eps * self.extent / 2.0; self.dim],
            radius: self.radius,
            amplitude: amp,
        };
        let g_comp = self.dim - 1;
        (
            TestFunctionSpec::vector_bump(self.dim, 0, bump(self.amplitude)),
            TestFunctionSpec::vector_bump(self.dim, g_comp, bump(self.amplitude)),
            TestFunctionSpec::tensor_bump(self.dim, 0, 0, bump(self.amplitude)),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.covariance()?;
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        if self.eps_list.is_empty() {
            return Err(Error::InvalidConfig("eps list must not be empty".into()));
        }
        let mut prev = f64::INFINITY;
        for &eps in &self.eps_list {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(Error::InvalidConfig(format!("eps {eps} outside (0, 1]")));
            }
            let k = -eps.log2();
            if (k - k.round()).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!("eps {eps} is not dyadic")));
            }
            if eps >= prev {
                return Err(Error::InvalidConfig(
                    "eps list must be strictly decreasing".into(),
                ));
            }
            prev = eps;
        }
        if !(self.fail_threshold >= 0.0 && self.fail_threshold < 1.0) {
            return Err(Error::InvalidConfig(
                "fail_threshold must lie in [0, 1)".into(),
            ));
        }
        let eps_min = *self.eps_list.last().unwrap();
        // wrap safety: the rescaled support stays within a quarter torus
        if self.radius / eps_min > self.extent / 4.0 {
            return Err(Error::InvalidConfig(format!(
                "support radius {} at eps {} exceeds a quarter of the torus",
                self.radius, eps_min
            )));
        }
        for &eps in &self.eps_list {
            let (f, g, big_f) = self.test_functions_at(eps);
            for spec in [&f, &g, &big_f] {
                functionals::check_resolution(&grid, eps, spec)?;
                spec.validate(eps * self.extent)?;
            }
        }
        Ok(())
    }

    /// Plain-text key-value serialization (the config.echo format).
    pub fn to_key_values(&self) -> String {
        let (lambda, kappa, link) = match self.link {
            LinkKind::ScalarSigmoid { lambda } => (lambda, 0.0, "scalar-sigmoid"),
            LinkKind::DiagonalSigmoid { lambda } => (lambda, 0.0, "diagonal-sigmoid"),
            LinkKind::Nonsymmetric { lambda, kappa } => (lambda, kappa, "nonsymmetric"),
        };
        let eps: Vec<String> = self.eps_list.iter().map(|e| e.to_string()).collect();
        format!(
            "amplitude = {}\nbeta = {}\nc0 = {}\nclip_tol = {}\ndim = {}\neps = {}\nextent = {}\nfail_threshold = {}\nkappa = {}\nlambda = {}\nlink = {}\nmaster_seed = {}\nn = {}\nn_samples = {}\npilot_samples = {}\nradius = {}\nsave_fields = {}\nsolution_functionals = {}\ntol = {}\n",
            self.amplitude,
            self.beta,
            self.c0,
            self.clip_tol,
            self.dim,
            eps.join(","),
            self.extent,
            self.fail_threshold,
            kappa,
            lambda,
            link,
            self.master_seed,
            self.n,
            self.n_samples,
            self.pilot_samples,
            self.radius,
            self.save_fields,
            self.solution_functionals,
            self.tol,
        )
    }

    /// Parse the key-value format (`key = value` lines, `#` comments).
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = EnsembleConfig::default();
        fn get_f64(map: &BTreeMap<String, String>, k: &str, d: f64) -> Result<f64> {
            match map.get(k) {
                Some(v) => v
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad number for {k}: {v}"))),
                None => Ok(d),
            }
        }
        fn get_usize(map: &BTreeMap<String, String>, k: &str, d: usize) -> Result<usize> {
            match map.get(k) {
                Some(v) => v
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad integer for {k}: {v}"))),
                None => Ok(d),
            }
        }
        fn get_bool(map: &BTreeMap<String, String>, k: &str, d: bool) -> Result<bool> {
            match map.get(k) {
                Some(v) => v
                    .parse::<bool>()
                    .map_err(|_| Error::InvalidConfig(format!("bad bool for {k}: {v}"))),
                None => Ok(d),
            }
        }
        cfg.master_seed = match map.get("master_seed") {
            Some(v) => v
                .parse::<u64>()
                .map_err(|_| Error::InvalidConfig(format!("bad seed: {v}")))?,
            None => cfg.master_seed,
        };
        cfg.n_samples = get_usize(&map, "n_samples", cfg.n_samples)?;
        cfg.dim = get_usize(&map, "dim", cfg.dim)?;
        cfg.n = get_usize(&map, "n", cfg.n)?;
        cfg.extent = get_f64(&map, "extent", cfg.extent)?;
        cfg.beta = get_f64(&map, "beta", cfg.beta)?;
        cfg.c0 = get_f64(&map, "c0", cfg.c0)?;
        cfg.tol = get_f64(&map, "tol", cfg.tol)?;
        cfg.clip_tol = get_f64(&map, "clip_tol", cfg.clip_tol)?;
        cfg.fail_threshold = get_f64(&map, "fail_threshold", cfg.fail_threshold)?;
        cfg.radius = get_f64(&map, "radius", cfg.radius)?;
        cfg.amplitude = get_f64(&map, "amplitude", cfg.amplitude)?;
        cfg.pilot_samples = get_usize(&map, "pilot_samples", cfg.pilot_samples)?;
        cfg.solution_functionals =
            get_bool(&map, "solution_functionals", cfg.solution_functionals)?;
        cfg.save_fields = get_bool(&map, "save_fields", cfg.save_fields)?;
        let lambda = get_f64(&map, "lambda", 0.25)?;
        let kappa = get_f64(&map, "kappa", 0.0)?;
        cfg.link = match map
            .get("link")
            .map(String::as_str)
            .unwrap_or("scalar-sigmoid")
        {
            "scalar-sigmoid" => LinkKind::ScalarSigmoid { lambda },
            "diagonal-sigmoid" => LinkKind::DiagonalSigmoid { lambda },
            "nonsymmetric" => LinkKind::Nonsymmetric { lambda, kappa },
            other => return Err(Error::InvalidConfig(format!("unknown link `{other}`"))),
        };
        if let Some(eps) = map.get("eps") {
            cfg.eps_list = eps
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidConfig(format!("bad eps entry: {v}")))
                })
                .collect::<Result<Vec<f64>>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scalar reductions for one sample at one eps. Everything that multiplies
/// the shared homogenized matrix is kept as an explicit linear form, so the
/// closing reduction can contract with the exact run-ensemble matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScaleScalars {
    /// `<F, a(G phi + Id)>` quadrature (the abar-free part of J0 and J2).
    j0_flux: f64,
    /// Matrix pairing `M[j][l] = sum_i <F_ij (G phi_i + e_i)_l>`.
    j0_matrix: Vec<f64>,
    j1: f64,
    /// `<g, grad v>` quadrature.
    grad_pairing: Option<f64>,
    /// `<g, a grad v>` quadrature.
    flux_pairing: Option<f64>,
    /// Matrix pairing `V[j][l] = <g_j (G v)_l>`.
    grad_matrix: Option<Vec<f64>>,
    /// `sum_i <g_j (d_i ubar) [a(G phi_i + e_i)]_j>`.
    xi_flux: Option<f64>,
    /// Matrix pairing `sum_i <g_j (d_i ubar) (G phi_i + e_i)_l>`.
    xi_matrix: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleOutput {
    index: usize,
    abar: Vec<f64>,
    scales: Vec<ScaleScalars>,
    flux_residual_max: f64,
    gradient_energy_max: f64,
    iterations_total: usize,
}

/// Everything a finished sweep produces in memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: EnsembleConfig,
    /// Homogenized matrix fixed by the pilot batch and shared by all samples.
    pub abar: Vec<f64>,
    /// Ensemble mean over the whole run (reported for reference).
    pub abar_run: Vec<f64>,
    pub samples: Vec<FunctionalSample>,
    pub failed_samples: usize,
    pub mean_clipped_mass: f64,
    pub total_iterations: usize,
}

/// One expensive pass per sample; fully deterministic given the config.
pub fn run_sweep(config: &EnsembleConfig) -> Result<SweepResult> {
    run_sweep_with_fields(config, None)
}

/// Variant persisting per-sample fields under `fields_dir` when configured.
pub fn run_sweep_with_fields(
    config: &EnsembleConfig,
    fields_dir: Option<&Path>,
) -> Result<SweepResult> {
    config.validate()?;
    let grid = config.grid()?;
    let spec = config.covariance()?;
    let spectral = Spectral::new(grid);
    let (spectrum, clipped_mass) = gaussian::embedding_spectrum(&spec, &grid, &spectral.fft);
    if clipped_mass > config.clip_tol {
        return Err(Error::ClippedSpectrum {
            mass: clipped_mass,
            tol: config.clip_tol,
        });
    }
    if config.save_fields {
        if let Some(dir) = fields_dir {
            std::fs::create_dir_all(dir)?;
        }
    }

    // Pilot batch fixes the shared homogenized matrix.
    let d = config.dim;
    let n_pilot = config.pilot_samples.min(config.n_samples).max(1);
    let pilot: Vec<Result<Vec<f64>>> = exec::map_samples(n_pilot, |k| {
        let a = synthesize_coefficient(config, &spec, &spectral, &spectrum, k as u64)?;
        let (phi, _) = corrector::solve_corrector(&spectral, &a, config.tol, false)?;
        let (q, _) = corrector::compute_flux(&a, &phi, false);
        Ok(corrector::homogenized_coefficient(&q))
    });
    let mut abar = vec![0.0; d * d];
    for r in pilot {
        let ab = r?;
        for c in 0..d * d {
            abar[c] += ab[c] / n_pilot as f64;
        }
    }

    // Slow-scale data per eps, shared read-only by every sample.
    let mut scales = Vec::with_capacity(config.eps_list.len());
    for &eps in &config.eps_list {
        let (f, g, big_f) = config.test_functions_at(eps);
        scales.push(functionals::prepare_scale(&grid, &abar, &f, &g, &big_f, eps)?);
    }

    let scales_ref = &scales;
    let spectral_ref = &spectral;
    let spectrum_ref = &spectrum;
    let save_dir = if config.save_fields { fields_dir } else { None };
    let outputs: Vec<Result<SampleOutput>> = exec::map_samples(config.n_samples, move |k| {
        run_one_sample(config, &spec, spectral_ref, spectrum_ref, scales_ref, k, save_dir)
    });

    let mut ok = Vec::with_capacity(config.n_samples);
    let mut failed = 0usize;
    let mut first_error = None;
    for r in outputs {
        match r {
            Ok(o) => ok.push(o),
            Err(e) => {
                failed += 1;
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    if failed as f64 > config.fail_threshold * config.n_samples as f64 {
        return Err(first_error.unwrap_or_else(|| {
            Error::InvalidConfig(format!("{failed} of {} samples failed", config.n_samples))
        }));
    }

    // Closing reduction. The run-ensemble matrix enters every functional
    // through the stored linear forms, so the deterministic matrix shared by
    // all samples is exactly the mean over the run.
    let n_ok = ok.len() as f64;
    let mut abar_run = vec![0.0; d * d];
    let mut iters = 0usize;
    for o in &ok {
        for c in 0..d * d {
            abar_run[c] += o.abar[c] / n_ok;
        }
        iters += o.iterations_total;
    }
    let n_eps = config.eps_list.len();
    // deterministic weights <F_ij> for the constant part of J2
    let mut f_weights = Vec::with_capacity(n_eps);
    for scale in &scales {
        let w = functionals::jacobian_weight(&grid, scale.eps);
        let mut fw = vec![0.0; d * d];
        for c in 0..d * d {
            fw[c] = stats::kahan_sum(scale.big_f.comp(c).iter().copied()) * w;
        }
        f_weights.push(fw);
    }
    let contract_abar = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for j in 0..d {
            for l in 0..d {
                s += abar_run[j * d + l] * m[j * d + l];
            }
        }
        s
    };
    let mut mean_grad = vec![0.0; n_eps];
    let mut mean_comm = vec![0.0; n_eps];
    let mut mean_flux = vec![0.0; n_eps];
    let mut mean_xi = vec![0.0; n_eps];
    if config.solution_functionals {
        for e in 0..n_eps {
            mean_grad[e] = stats::kahan_sum(
                ok.iter().map(|o| o.scales[e].grad_pairing.unwrap_or(0.0)),
            ) / n_ok;
            mean_flux[e] = stats::kahan_sum(
                ok.iter().map(|o| o.scales[e].flux_pairing.unwrap_or(0.0)),
            ) / n_ok;
            mean_comm[e] = stats::kahan_sum(ok.iter().map(|o| {
                o.scales[e].flux_pairing.unwrap()
                    - contract_abar(o.scales[e].grad_matrix.as_deref().unwrap())
            })) / n_ok;
            // The commutator has vanishing expectation; the ensemble analogue
            // centers its weighted average as well.
            mean_xi[e] = stats::kahan_sum(ok.iter().map(|o| {
                o.scales[e].xi_flux.unwrap()
                    - contract_abar(o.scales[e].xi_matrix.as_deref().unwrap())
            })) / n_ok;
        }
    }
    let mut samples = Vec::with_capacity(ok.len() * n_eps);
    for o in &ok {
        for (e, s) in o.scales.iter().enumerate() {
            let eps = config.eps_list[e];
            let hat = functionals::hat_factor(eps, config.beta, d);
            let j0 = s.j0_flux - contract_abar(&s.j0_matrix);
            // J2 subtracts only the constant abar column means
            let mut j2_abar = 0.0;
            for i in 0..d {
                for j in 0..d {
                    j2_abar += f_weights[e][i * d + j] * abar_run[j * d + i];
                }
            }
            let j2 = s.j0_flux - j2_abar;
            let (i1, i2, e_val) = if config.solution_functionals {
                let c_k =
                    s.flux_pairing.unwrap() - contract_abar(s.grad_matrix.as_deref().unwrap());
                let x_k = s.xi_flux.unwrap() - contract_abar(s.xi_matrix.as_deref().unwrap());
                (
                    s.grad_pairing.unwrap() - mean_grad[e],
                    s.flux_pairing.unwrap() - mean_flux[e],
                    (c_k - mean_comm[e]) - (x_k - mean_xi[e]),
                )
            } else {
                (f64::NAN, f64::NAN, f64::NAN)
            };
            samples.push(FunctionalSample {
                sample_index: o.index,
                eps,
                j0,
                j1: s.j1,
                j2,
                i1,
                i2,
                e_val,
                j0_hat: j0 * hat,
                i1_hat: i1 * hat,
                e_hat: e_val * hat,
                centering: Centering::EnsembleMean,
            });
        }
    }
    Ok(SweepResult {
        config: config.clone(),
        abar,
        abar_run,
        samples,
        failed_samples: failed,
        mean_clipped_mass: clipped_mass,
        total_iterations: iters,
    })
}

fn synthesize_coefficient(
    config: &EnsembleConfig,
    spec: &CovarianceSpec,
    spectral: &Spectral,
    spectrum: &[f64],
    sample: u64,
) -> Result<Field> {
    let channels: Vec<gaussian::GaussianField> = (0..spec.link.channels(config.dim))
        .map(|c| {
            gaussian::synthesize_with_spectrum(
                &spectral.grid,
                &spectral.fft,
                spectrum,
                0.0,
                config.master_seed,
                sample,
                c as u64,
            )
        })
        .collect::<Result<_>>()?;
    gaussian::apply_link(spec, &channels)
}

#[allow(clippy::too_many_arguments)]
fn run_one_sample(
    config: &EnsembleConfig,
    spec: &CovarianceSpec,
    spectral: &Spectral,
    spectrum: &[f64],
    scales: &[ScaleFields],
    k: usize,
    save_dir: Option<&Path>,
) -> Result<SampleOutput> {
    let grid = spectral.grid;
    let d = grid.dim();
    let a = synthesize_coefficient(config, spec, spectral, spectrum, k as u64)?;
    let set = corrector::build_corrector_set(spectral, &a, config.tol, false)?;
    let mut iterations_total: usize = set.reports.iter().map(|r| r.iterations).sum();

    if let Some(dir) = save_dir {
        crate::hgfd::write_file(&dir.join(format!("a_{k:04}.hgfd")), &a)?;
        for (i, phi) in set.phi.iter().enumerate() {
            crate::hgfd::write_file(&dir.join(format!("phi{i}_{k:04}.hgfd")), phi)?;
        }
    }

    let vol = grid.vol();
    // gradients and pointwise fluxes of the correctors, reused per scale
    let gphi: Vec<Field> = set.phi.iter().map(operators::centered_grad).collect();
    let qpw: Vec<Field> = (0..d)
        .map(|i| corrector::pointwise_flux(&a, &set.phi[i], i, false))
        .collect();
    let mut out_scales = Vec::with_capacity(scales.len());
    for (e_idx, scale) in scales.iter().enumerate() {
        let w = functionals::jacobian_weight(&grid, scale.eps);
        let mut j0_flux = 0.0;
        let mut j0_matrix = vec![0.0; d * d];
        let mut j1 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let fij = scale.big_f.comp(i * d + j);
                let qj = qpw[i].comp(j);
                j0_flux += stats::kahan_sum((0..vol).map(|idx| fij[idx] * qj[idx])) * w;
                let gj = gphi[i].comp(j);
                j1 += stats::kahan_sum((0..vol).map(|idx| fij[idx] * gj[idx])) * w;
                for l in 0..d {
                    let gl = gphi[i].comp(l);
                    let unit = if l == i { 1.0 } else { 0.0 };
                    j0_matrix[j * d + l] +=
                        stats::kahan_sum((0..vol).map(|idx| fij[idx] * (gl[idx] + unit))) * w;
                }
            }
        }
        let (grad_pairing, flux_pairing, grad_matrix, xi_flux, xi_matrix) =
            if config.solution_functionals {
                let (v, rep) = functionals::solve_heterogeneous(spectral, &a, scale, config.tol)?;
                iterations_total += rep.iterations;
                if let Some(dir) = save_dir {
                    crate::hgfd::write_file(&dir.join(format!("v_e{e_idx}_{k:04}.hgfd")), &v)?;
                }
                let gv = operators::centered_grad(&v);
                let mut flux = Field::vector(grid);
                operators::coeff_apply(&a, &gv, false, &mut flux);
                let g_fast = scale.g_as_fast(&grid)?;
                let u_pair = functionals::contract(&g_fast, &gv, w);
                let f_pair = functionals::contract(&g_fast, &flux, w);
                let mut v_matrix = vec![0.0; d * d];
                for j in 0..d {
                    let gj = scale.g.comp(j);
                    for l in 0..d {
                        let gl = gv.comp(l);
                        v_matrix[j * d + l] =
                            stats::kahan_sum((0..vol).map(|idx| gj[idx] * gl[idx])) * w;
                    }
                }
                let mut t_x = 0.0;
                let mut m_x = vec![0.0; d * d];
                for i in 0..d {
                    let pi = scale.ubar_grad.comp(i);
                    for j in 0..d {
                        let gj = scale.g.comp(j);
                        let qj = qpw[i].comp(j);
                        t_x += stats::kahan_sum(
                            (0..vol).map(|idx| gj[idx] * pi[idx] * qj[idx]),
                        ) * w;
                        for l in 0..d {
                            let gl = gphi[i].comp(l);
                            let unit = if l == i { 1.0 } else { 0.0 };
                            m_x[j * d + l] += stats::kahan_sum(
                                (0..vol).map(|idx| gj[idx] * pi[idx] * (gl[idx] + unit)),
                            ) * w;
                        }
                    }
                }
                (
                    Some(u_pair),
                    Some(f_pair),
                    Some(v_matrix),
                    Some(t_x),
                    Some(m_x),
                )
            } else {
                (None, None, None, None, None)
            };
        out_scales.push(ScaleScalars {
            j0_flux,
            j0_matrix,
            j1,
            grad_pairing,
            flux_pairing,
            grad_matrix,
            xi_flux,
            xi_matrix,
        });
    }

    let flux_residual_max = set
        .diagnostics
        .flux_potential_residual
        .iter()
        .fold(0.0f64, |m, v| m.max(*v));
    let gradient_energy_max = set
        .diagnostics
        .gradient_energy
        .iter()
        .fold(0.0f64, |m, v| m.max(*v));
    Ok(SampleOutput {
        index: k,
        abar: set.abar.clone(),
        scales: out_scales,
        flux_residual_max,
        gradient_energy_max,
        iterations_total,
    })
}

/// CSV serialization with the fixed column schema.
pub fn samples_to_csv(beta: f64, samples: &[FunctionalSample]) -> String {
    let mut out =
        String::from("sample,eps,beta,j0,j1,j2,i1,i2,e,j0_hat,i1_hat,e_hat,centering\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.sample_index,
            s.eps,
            beta,
            s.j0,
            s.j1,
            s.j2,
            s.i1,
            s.i2,
            s.e_val,
            s.j0_hat,
            s.i1_hat,
            s.e_hat,
            s.centering
        ));
    }
    out
}

/// Parse the CSV back (used by replay checks and report rendering).
pub fn samples_from_csv(text: &str) -> Result<Vec<FunctionalSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("sample,eps,beta") {
                return Err(Error::Format("unexpected CSV header".into()));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 13 {
            return Err(Error::Format(format!("row {i}: expected 13 columns")));
        }
        let f = |j: usize| -> Result<f64> {
            cols[j]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("row {i} col {j}: bad float")))
        };
        out.push(FunctionalSample {
            sample_index: cols[0]
                .parse()
                .map_err(|_| Error::Format(format!("row {i}: bad sample index")))?,
            eps: f(1)?,
            j0: f(3)?,
            j1: f(4)?,
            j2: f(5)?,
            i1: f(6)?,
            i2: f(7)?,
            e_val: f(8)?,
            j0_hat: f(9)?,
            i1_hat: f(10)?,
            e_hat: f(11)?,
            centering: match cols[12] {
                "ensemble-mean" => Centering::EnsembleMean,
                "precomputed" => Centering::Precomputed,
                other => return Err(Error::Format(format!("row {i}: bad centering {other}"))),
            },
        });
    }
    Ok(out)
}

/// Per-eps moment summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsStatistics {
    pub eps: f64,
    pub j0_raw: MomentSummary,
    pub j0_hat: MomentSummary,
    pub i1_hat: Option<MomentSummary>,
    pub e_hat: Option<MomentSummary>,
}

/// Scaling verdicts against the predicted exponents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub beta: f64,
    pub dim: usize,
    pub n_samples: usize,
    pub eps: Vec<f64>,
    pub abar: Vec<f64>,
    pub per_eps: Vec<EpsStatistics>,
    pub var_j0_fit: ScalingFit,
    pub var_j0_hat_fit: ScalingFit,
    /// beta ∧ d, the predicted slope of log Var J0 against log eps.
    pub predicted_var_slope: f64,
    /// Least-squares slope of `log pi*(1/eps)` over the same points.
    pub pi_slope: f64,
    /// `|hat slope - (raw slope + pi slope)|`; zero up to rounding by the
    /// linearity of least squares.
    pub hat_link_defect: f64,
    /// Fit of the second moment of the rescaled two-scale error.
    pub e_hat_fit: Option<ScalingFit>,
    /// Fit of the second moment of the rescaled commutator functional.
    pub j0_hat_fit: Option<ScalingFit>,
    /// Predicted decay exponent of the rescaled two-scale error (up to logs).
    pub predicted_e_decay: f64,
    pub heavy_tails: bool,
    pub failed_samples: usize,
    pub mean_clipped_mass: f64,
    /// At the smallest eps: upper CI of the |E-hat| second moment vs lower CI
    /// of the |J0-hat| second moment; subdominance holds when upper < lower.
    pub smallest_eps_separation: Option<(f64, f64)>,
}

/// Group samples by eps (descending) and estimate all moments and fits.
pub fn analyze(result: &SweepResult) -> Result<ScalingReport> {
    let config = &result.config;
    let mut by_eps: BTreeMap<u64, Vec<&FunctionalSample>> = BTreeMap::new();
    for s in &result.samples {
        by_eps.entry(s.eps.to_bits()).or_default().push(s);
    }
    let mut eps_sorted: Vec<f64> = by_eps.keys().map(|b| f64::from_bits(*b)).collect();
    eps_sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let has_solution = result.samples.iter().all(|s| s.i1.is_finite());
    let mut per_eps = Vec::new();
    let mut var_j0 = Vec::new();
    let mut var_j0_hat = Vec::new();
    let mut m2_e_hat = Vec::new();
    let mut m2_j0_hat = Vec::new();
    let mut heavy = false;
    for &eps in &eps_sorted {
        let mut rows: Vec<&FunctionalSample> = by_eps[&eps.to_bits()].clone();
        rows.sort_by_key(|s| s.sample_index);
        let j0: Vec<f64> = rows.iter().map(|s| s.j0).collect();
        let j0h: Vec<f64> = rows.iter().map(|s| s.j0_hat).collect();
        let j0_raw = stats::estimate_moments(&j0)?;
        let j0_hat = stats::estimate_moments(&j0h)?;
        heavy |= j0_raw.heavy_tail;
        var_j0.push(j0_raw.variance.value);
        var_j0_hat.push(j0_hat.variance.value);
        m2_j0_hat.push(j0_hat.moment2.value);
        let (i1_hat, e_hat) = if has_solution {
            let i1h: Vec<f64> = rows.iter().map(|s| s.i1_hat).collect();
            let eh: Vec<f64> = rows.iter().map(|s| s.e_hat).collect();
            let i1s = stats::estimate_moments(&i1h)?;
            let es = stats::estimate_moments(&eh)?;
            heavy |= i1s.heavy_tail || es.heavy_tail;
            m2_e_hat.push(es.moment2.value);
            (Some(i1s), Some(es))
        } else {
            (None, None)
        };
        per_eps.push(EpsStatistics {
            eps,
            j0_raw,
            j0_hat,
            i1_hat,
            e_hat,
        });
    }

    let var_j0_fit = stats::fit_scaling(&eps_sorted, &var_j0)?;
    let var_j0_hat_fit = stats::fit_scaling(&eps_sorted, &var_j0_hat)?;
    let pi_values: Vec<f64> = eps_sorted
        .iter()
        .map(|&e| functionals::pi_star(1.0 / e, config.beta, config.dim))
        .collect();
    let pi_fit = stats::fit_scaling(&eps_sorted, &pi_values)?;
    let hat_link_defect = (var_j0_hat_fit.slope - (var_j0_fit.slope + pi_fit.slope)).abs();

    let e_hat_fit = if has_solution {
        Some(stats::fit_scaling(&eps_sorted, &m2_e_hat)?)
    } else {
        None
    };
    let j0_hat_fit = Some(stats::fit_scaling(&eps_sorted, &m2_j0_hat)?);

    let smallest_eps_separation = if has_solution {
        let last = per_eps.last().unwrap();
        let e_upper = last.e_hat.as_ref().unwrap().moment2.ci_upper;
        let j_lower = last.j0_hat.moment2.ci_lower;
        Some((e_upper, j_lower))
    } else {
        None
    };

    Ok(ScalingReport {
        beta: config.beta,
        dim: config.dim,
        n_samples: config.n_samples,
        eps: eps_sorted,
        abar: result.abar.clone(),
        per_eps,
        var_j0_fit,
        var_j0_hat_fit,
        predicted_var_slope: config.beta.min(config.dim as f64),
        pi_slope: pi_fit.slope,
        hat_link_defect,
        e_hat_fit,
        j0_hat_fit,
        predicted_e_decay: 1.0,
        heavy_tails: heavy,
        failed_samples: result.failed_samples,
        mean_clipped_mass: result.mean_clipped_mass,
        smallest_eps_separation,
    })
}

/// Write the run directory: config echo, CSV, scaling report.
pub fn write_run_dir(dir: &Path, result: &SweepResult, report: &ScalingReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.echo"), result.config.to_key_values())?;
    std::fs::write(
        dir.join("samples.csv"),
        samples_to_csv(result.config.beta, &result.samples),
    )?;
    std::fs::write(
        dir.join("scaling.json"),
        serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(())
}
