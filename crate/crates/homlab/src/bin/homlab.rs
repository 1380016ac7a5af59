//! Command-line front end for the homogenization laboratory.

use clap::{Args, Parser, Subcommand};
use homlab::corrector;
use homlab::derivative::{self, CheckedFunctional, Perturbation};
use homlab::ensemble::{self, EnsembleConfig};
use homlab::error::{Error, Result};
use homlab::functionals;
use homlab::gaussian::{self, LinkKind};
use homlab::grid::{Field, TorusGrid};
use homlab::hgfd;
use homlab::matrix;
use homlab::operators::Spectral;
use homlab::report;
use homlab::testfn::{BumpKind, BumpSpec, TestFunctionSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "homlab",
    about = "Numerical laboratory for fluctuations in stochastic homogenization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct FieldArgs {
    /// Covariance decay exponent.
    #[arg(long)]
    beta: f64,
    /// Covariance prefactor.
    #[arg(long, default_value_t = 1.0)]
    c0: f64,
    /// Dimension of the torus.
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Cells per side (a power of two).
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Torus side length.
    #[arg(long, default_value_t = 16.0)]
    extent: f64,
    /// Master seed of the realization.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Link family: scalar-sigmoid, diagonal-sigmoid, or nonsymmetric.
    #[arg(long, default_value = "scalar-sigmoid")]
    link: String,
    /// Ellipticity floor of the link.
    #[arg(long, default_value_t = 0.25)]
    lambda: f64,
    /// Antisymmetric amplitude (nonsymmetric link only).
    #[arg(long, default_value_t = 0.2)]
    kappa: f64,
    /// Tolerance on the clipped spectral mass.
    #[arg(long, default_value_t = gaussian::DEFAULT_CLIP_TOL)]
    clip_tol: f64,
}

impl FieldArgs {
    fn link(&self) -> Result<LinkKind> {
        Ok(match self.link.as_str() {
            "scalar-sigmoid" => LinkKind::ScalarSigmoid { lambda: self.lambda },
            "diagonal-sigmoid" => LinkKind::DiagonalSigmoid { lambda: self.lambda },
            "nonsymmetric" => LinkKind::Nonsymmetric {
                lambda: self.lambda,
                kappa: self.kappa,
            },
            other => return Err(Error::InvalidConfig(format!("unknown link `{other}`"))),
        })
    }

    fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.d, self.extent, self.n)
    }

    fn coefficient(&self, spectral: &Spectral, sample: u64) -> Result<Field> {
        let spec = gaussian::CovarianceSpec::new(self.beta, self.c0, self.d, self.link()?)?;
        let (spectrum, clipped) =
            gaussian::embedding_spectrum(&spec, &spectral.grid, &spectral.fft);
        if clipped > self.clip_tol {
            return Err(Error::ClippedSpectrum {
                mass: clipped,
                tol: self.clip_tol,
            });
        }
        let channels: Vec<gaussian::GaussianField> = (0..spec.link.channels(self.d))
            .map(|c| {
                gaussian::synthesize_with_spectrum(
                    &spectral.grid,
                    &spectral.fft,
                    &spectrum,
                    clipped,
                    self.seed,
                    sample,
                    c as u64,
                )
            })
            .collect::<Result<_>>()?;
        gaussian::apply_link(&spec, &channels)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one Gaussian channel and write it as HGFD.
    GenField {
        #[command(flatten)]
        field: FieldArgs,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Channel index within the sample.
        #[arg(long, default_value_t = 0)]
        channel: u64,
    },
    /// Solve the cell problems for one realization and persist the set.
    Corrector {
        #[command(flatten)]
        field: FieldArgs,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble-average the homogenized matrix over realizations.
    Homogenize {
        #[command(flatten)]
        field: FieldArgs,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Check the pathwise recovery identities on a two-sample ensemble.
    Identities {
        #[command(flatten)]
        field: FieldArgs,
        #[arg(long, default_value_t = 1e-11)]
        tol: f64,
        #[arg(long, default_value_t = 0.5)]
        eps: f64,
    },
    /// Verify the functional-derivative formulas against central differences.
    DerivativeCheck {
        #[command(flatten)]
        field: FieldArgs,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        /// Target finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        t: f64,
        /// Number of random single-cell perturbations.
        #[arg(long, default_value_t = 5)]
        perturbations: usize,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo sweep from a key-value config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for config echo, CSV, JSON, and charts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the SVG chart and verdicts for a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Acceptance band around the predicted variance slope.
        #[arg(long, default_value_t = 0.35)]
        slope_band: f64,
        /// Minimum decay slope of the rescaled two-scale error.
        #[arg(long, default_value_t = 0.6)]
        e_decay_min: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();
    match run(cli) {
        Ok(()) => {
            eprintln!("done in {:.2}s", started.elapsed().as_secs_f64());
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}

fn append_log(dir: &Path, line: &str) {
    let _ = std::fs::create_dir_all(dir);
    let path = dir.join("log.txt");
    let mut existing = std::fs::read_to_string(&path).unwrap_or_default();
    existing.push_str(line);
    existing.push('\n');
    let _ = std::fs::write(path, existing);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenField { field, out, channel } => {
            let grid = field.grid()?;
            let spec =
                gaussian::CovarianceSpec::new(field.beta, field.c0, field.d, field.link()?)?;
            let spectral = Spectral::new(grid);
            let g = gaussian::synthesize_gaussian(
                &spec,
                &grid,
                &spectral.fft,
                field.seed,
                0,
                channel,
                field.clip_tol,
            )?;
            hgfd::write_file(&out, &g.field)?;
            println!(
                "wrote {} ({}^{} cells, clipped mass {:.3e})",
                out.display(),
                grid.n(),
                grid.dim(),
                g.clipped_mass
            );
            Ok(())
        }
        Command::Corrector { field, tol, out } => {
            let grid = field.grid()?;
            let spectral = Spectral::new(grid);
            let a = field.coefficient(&spectral, 0)?;
            let set = corrector::build_corrector_set(&spectral, &a, tol, false)?;
            std::fs::create_dir_all(&out)?;
            hgfd::write_file(&out.join("a.hgfd"), &a)?;
            let d = grid.dim();
            let mut phi = Field::zeros(grid, d);
            for i in 0..d {
                phi.comp_mut(i).copy_from_slice(set.phi[i].comp(0));
            }
            hgfd::write_file(&out.join("phi.hgfd"), &phi)?;
            let mut q = Field::zeros(grid, d * d);
            for i in 0..d {
                for j in 0..d {
                    q.comp_mut(i * d + j).copy_from_slice(set.q[i].comp(j));
                }
            }
            hgfd::write_file(&out.join("q.hgfd"), &q)?;
            let pairs = (d * (d - 1) / 2).max(1);
            let mut sigma = Field::zeros(grid, d * pairs);
            for i in 0..d {
                for p in 0..set.sigma[i].comps() {
                    sigma
                        .comp_mut(i * pairs + p)
                        .copy_from_slice(set.sigma[i].comp(p));
                }
            }
            hgfd::write_file(&out.join("sigma.hgfd"), &sigma)?;
            let sidecar = serde_json::json!({
                "abar": set.abar,
                "diagnostics": set.diagnostics,
                "reports": set.reports,
                "extent": grid.extent(),
            });
            std::fs::write(
                out.join("corrector.json"),
                serde_json::to_string_pretty(&sidecar)
                    .map_err(|e| Error::Format(e.to_string()))?,
            )?;
            append_log(&out, &format!("corrector beta={} seed={}", field.beta, field.seed));
            println!("abar = {:?}", set.abar);
            for (i, r) in set.diagnostics.flux_potential_residual.iter().enumerate() {
                println!(
                    "direction {i}: flux-potential residual {r:.3e}, unresolved flux mass {:.3e}",
                    set.diagnostics.unresolved_flux_mass[i]
                );
            }
            Ok(())
        }
        Command::Homogenize { field, tol, samples } => {
            let grid = field.grid()?;
            let spectral = Spectral::new(grid);
            let d = grid.dim();
            let mut mean = vec![0.0; d * d];
            for k in 0..samples {
                let a = field.coefficient(&spectral, k as u64)?;
                let set = corrector::build_corrector_set(&spectral, &a, tol, false)?;
                for c in 0..d * d {
                    mean[c] += set.abar[c] / samples as f64;
                }
            }
            println!("{}", serde_json::json!({ "abar": mean, "samples": samples }));
            Ok(())
        }
        Command::Identities { field, tol, eps } => {
            let grid = field.grid()?;
            let spectral = Spectral::new(grid);
            let d = grid.dim();
            let mut pairs = Vec::new();
            let mut abar = vec![0.0; d * d];
            for k in 0..2u64 {
                let a = field.coefficient(&spectral, k)?;
                let set = corrector::build_corrector_set(&spectral, &a, tol, false)?;
                for c in 0..d * d {
                    abar[c] += set.abar[c] / 2.0;
                }
                pairs.push((a, set));
            }
            let slow_center = eps * grid.extent() / 2.0;
            let bump = BumpSpec {
                kind: BumpKind::SmoothBump,
                center: vec![slow_center; d],
                radius: 1.0,
                amplitude: 1.0,
            };
            let f = TestFunctionSpec::vector_bump(d, 0, bump.clone());
            let g = TestFunctionSpec::vector_bump(d, d - 1, bump.clone());
            let big_f = TestFunctionSpec::tensor_bump(d, 0, 0, bump);
            let scale = functionals::prepare_scale(&grid, &abar, &f, &g, &big_f, eps)?;
            let realizations: Vec<functionals::Realization> = pairs
                .into_iter()
                .map(|(a, set)| {
                    let (v, _) = functionals::solve_heterogeneous(&spectral, &a, &scale, tol)?;
                    let xi = functionals::commutator_field(&a, &set.phi, &abar);
                    Ok(functionals::Realization { a, set, v, xi })
                })
                .collect::<Result<_>>()?;
            let reports = functionals::identity_checks(&spectral, &realizations, &abar, &scale)?;
            println!("identity residuals at eps = {eps} ({} link):", field.link);
            println!("sample      i1          i2          j1          j2    proj-inv   two-scale");
            for (k, r) in reports.iter().enumerate() {
                println!(
                    "{k:>6}  {:.3e}  {:.3e}  {:.3e}  {:.3e}  {:.3e}  {:.3e}",
                    r.i1, r.i2, r.j1, r.j2, r.i1_projection_invariance, r.two_scale
                );
            }
            let worst = reports
                .iter()
                .map(|r| r.i1.max(r.i2).max(r.j1).max(r.j2))
                .fold(0.0f64, f64::max);
            if worst > 1e-6 {
                return Err(Error::DegenerateFit(format!(
                    "recovery identity residual {worst:.3e} exceeds 1e-6"
                )));
            }
            Ok(())
        }
        Command::DerivativeCheck {
            field,
            tol,
            t,
            perturbations,
            out,
        } => {
            let grid = field.grid()?;
            let spectral = Spectral::new(grid);
            let a = field.coefficient(&spectral, 0)?;
            let set = corrector::build_corrector_set(&spectral, &a, tol, false)?;
            let d = grid.dim();
            let eps = 0.5;
            let slow_center = eps * grid.extent() / 2.0;
            let bump = BumpSpec {
                kind: BumpKind::SmoothBump,
                center: vec![slow_center; d],
                radius: 1.0,
                amplitude: 1.0,
            };
            let f = TestFunctionSpec::vector_bump(d, 0, bump.clone());
            let g = TestFunctionSpec::vector_bump(d, d - 1, bump.clone());
            let big_f = TestFunctionSpec::tensor_bump(d, 0, 0, bump);
            let scale = functionals::prepare_scale(&grid, &set.abar, &f, &g, &big_f, eps)?;
            let (v, _) = functionals::solve_heterogeneous(&spectral, &a, &scale, tol)?;
            let margin = admissibility_margin(&a, field.lambda);
            let magnitude = (0.5 * margin).min(0.1);
            let mut rng = ChaCha12Rng::seed_from_u64(field.seed ^ 0xD5);
            let mut checks = Vec::new();
            let mut all_pass = true;
            for _ in 0..perturbations {
                let cell = rng.gen_range(0..grid.vol());
                let entries: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let p = Perturbation::single_cell_symmetric(grid, cell, magnitude, &entries)?;
                for kind in [CheckedFunctional::J0, CheckedFunctional::E] {
                    let check = derivative::run_derivative_check(
                        &spectral, kind, &a, &set, &set.abar, &scale, &v, &p, t, tol, 0.0,
                    )?;
                    println!(
                        "{:?} cell {cell}: pairing {:+.6e}, rel err {:.2e}, slope {:.2} -> {}",
                        kind,
                        check.pairing,
                        check.max_rel_error,
                        check.richardson_slope,
                        if check.pass { "pass" } else { "FAIL" }
                    );
                    all_pass &= check.pass;
                    checks.push(check);
                }
            }
            let xi = functionals::commutator_field(&a, &set.phi, &set.abar);
            let diag = derivative::weighted_norm_beta(&xi, field.beta, field.beta > d as f64);
            println!(
                "weighted norm of the commutator at beta {}: {diag:.6e}",
                field.beta
            );
            if let Some(path) = out {
                std::fs::write(
                    &path,
                    serde_json::to_string_pretty(&checks)
                        .map_err(|e| Error::Format(e.to_string()))?,
                )?;
            }
            if !all_pass {
                return Err(Error::DegenerateFit(
                    "derivative check failed the acceptance band".into(),
                ));
            }
            Ok(())
        }
        Command::Sweep { config, out } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                Error::InvalidConfig(format!("cannot read {}: {e}", config.display()))
            })?;
            let cfg = EnsembleConfig::from_key_values(&text)?;
            let fields_dir = out.join("fields");
            let result = ensemble::run_sweep_with_fields(&cfg, Some(&fields_dir))?;
            let report_data = ensemble::analyze(&result)?;
            ensemble::write_run_dir(&out, &result, &report_data)?;
            append_log(
                &out,
                &format!(
                    "sweep n_samples={} eps={:?} iterations={}",
                    cfg.n_samples, cfg.eps_list, result.total_iterations
                ),
            );
            println!("{}", report::text_summary(&report_data, 0.35, 0.6));
            Ok(())
        }
        Command::Report {
            run,
            slope_band,
            e_decay_min,
        } => {
            let summary = report::render_report(&run, slope_band, e_decay_min)?;
            println!("{summary}");
            Ok(())
        }
    }
}

/// Smallest distance of any cell to the admissibility boundary.
fn admissibility_margin(a: &Field, lambda: f64) -> f64 {
    let grid = a.grid();
    let d = grid.dim();
    let mut cell = vec![0.0; d * d];
    let mut margin = f64::INFINITY;
    for idx in 0..grid.vol() {
        for c in 0..d * d {
            cell[c] = a.at(c, idx);
        }
        let norm_gap = 1.0 - matrix::operator_norm(&cell, d);
        let eig_gap = matrix::min_sym_eigenvalue(&cell, d) - lambda;
        margin = margin.min(norm_gap.min(eig_gap));
    }
    margin.max(1e-3)
}
