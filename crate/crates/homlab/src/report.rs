//! Run-directory rendering: hand-rolled SVG log-log charts with fitted and
//! reference lines, plus a text verdict per acceptance band.

use crate::ensemble::ScalingReport;
use crate::error::{Error, Result};
use crate::functionals;
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 180.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

struct LogAxes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl LogAxes {
    fn x(&self, v: f64) -> f64 {
        let t = (v.log10() - self.x0) / (self.x1 - self.x0);
        MARGIN_L + t * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v.log10() - self.y0) / (self.y1 - self.y0);
        HEIGHT - MARGIN_B - t * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
    /// Optional (slope, intercept) of a straight reference/fit in log-log.
    line: Option<(f64, f64)>,
    dashed: bool,
}

fn render_chart(title: &str, series: &[Series]) -> String {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for (x, y) in &s.points {
            if *y > 0.0 {
                xs.push(*x);
                ys.push(*y);
            }
        }
    }
    if xs.is_empty() {
        return String::from("<svg xmlns=\"http://www.w3.org/2000/svg\"/>");
    }
    let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ax = LogAxes {
        x0: xmin.log10() - 0.15,
        x1: xmax.log10() + 0.15,
        y0: ymin.log10() - 0.3,
        y1: ymax.log10() + 0.3,
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        title
    );
    // frame
    let _ = write!(
        svg,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    // x ticks at powers of two
    let mut k = xmin.log2().floor() as i32;
    while (2f64).powi(k) <= xmax * 1.01 {
        let v = (2f64).powi(k);
        if v >= xmin * 0.99 {
            let x = ax.x(v);
            let _ = write!(
                svg,
                "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n\
                 <text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">2^{k}</text>\n",
                HEIGHT - MARGIN_B,
                HEIGHT - MARGIN_B + 6.0,
                HEIGHT - MARGIN_B + 22.0
            );
        }
        k += 1;
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">eps (log)</text>\n",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        HEIGHT - 14.0
    );
    // y ticks at powers of ten
    let mut p = ax.y0.ceil() as i32;
    while (p as f64) <= ax.y1 {
        let v = 10f64.powi(p);
        let y = ax.y(v);
        let _ = write!(
            svg,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">1e{p}</text>\n",
            MARGIN_L - 6.0,
            MARGIN_L,
            MARGIN_L - 10.0,
            y + 4.0
        );
        p += 1;
    }

    let mut legend_y = MARGIN_T + 16.0;
    for s in series {
        let dash = if s.dashed { " stroke-dasharray=\"6,4\"" } else { "" };
        if let Some((slope, intercept)) = s.line {
            // straight line in log-log through the plotted x-range
            let xa = 10f64.powf(ax.x0 + 0.02);
            let xb = 10f64.powf(ax.x1 - 0.02);
            let ya = (intercept + slope * xa.ln()).exp();
            let yb = (intercept + slope * xb.ln()).exp();
            let _ = write!(
                svg,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"1.5\"{dash}/>\n",
                ax.x(xa),
                ax.y(ya.max(1e-300)),
                ax.x(xb),
                ax.y(yb.max(1e-300)),
                s.color
            );
        }
        if !s.points.is_empty() {
            let mut path = String::new();
            for (i, (x, y)) in s.points.iter().enumerate() {
                if *y <= 0.0 {
                    continue;
                }
                let cmd = if i == 0 { 'M' } else { 'L' };
                let _ = write!(path, "{cmd}{:.2},{:.2} ", ax.x(*x), ax.y(*y));
            }
            let _ = write!(
                svg,
                "<path d=\"{path}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1\" opacity=\"0.6\"{dash}/>\n",
                s.color
            );
            for (x, y) in &s.points {
                if *y <= 0.0 {
                    continue;
                }
                let _ = write!(
                    svg,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{}\"/>\n",
                    ax.x(*x),
                    ax.y(*y),
                    s.color
                );
            }
        }
        let _ = write!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"14\" height=\"4\" fill=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            WIDTH - MARGIN_R + 12.0,
            legend_y - 4.0,
            s.color,
            WIDTH - MARGIN_R + 32.0,
            legend_y,
            s.label
        );
        legend_y += 18.0;
    }
    svg.push_str("</svg>\n");
    svg
}

/// Build the SVG chart for a scaling report.
pub fn scaling_chart(report: &ScalingReport) -> String {
    let mut series = Vec::new();
    let var_points: Vec<(f64, f64)> = report
        .eps
        .iter()
        .zip(report.per_eps.iter())
        .map(|(e, s)| (*e, s.j0_raw.variance.value))
        .collect();
    series.push(Series {
        label: "Var J0 (fit)",
        color: "#1f6fb2",
        points: var_points,
        line: Some((report.var_j0_fit.slope, report.var_j0_fit.intercept)),
        dashed: false,
    });
    // reference slope beta ∧ d anchored at the first point
    if let Some((e0, v0)) = report
        .eps
        .first()
        .zip(report.per_eps.first().map(|s| s.j0_raw.variance.value))
    {
        if v0 > 0.0 {
            let slope = report.predicted_var_slope;
            let intercept = v0.ln() - slope * e0.ln();
            series.push(Series {
                label: "predicted slope",
                color: "#d62728",
                points: Vec::new(),
                line: Some((slope, intercept)),
                dashed: true,
            });
        }
    }
    if report.e_hat_fit.is_some() {
        let e_points: Vec<(f64, f64)> = report
            .eps
            .iter()
            .zip(report.per_eps.iter())
            .map(|(e, s)| (*e, s.e_hat.as_ref().map_or(0.0, |m| m.moment2.value)))
            .collect();
        series.push(Series {
            label: "|E-hat| m2",
            color: "#2ca02c",
            points: e_points,
            line: report.e_hat_fit.as_ref().map(|f| (f.slope, f.intercept)),
            dashed: false,
        });
        // the predicted envelope eps * mu*(1/eps), anchored at the first point
        if let Some(first) = report.per_eps.first() {
            if let Some(m) = &first.e_hat {
                let e0 = first.eps;
                let anchor = m.moment2.value;
                if anchor > 0.0 {
                    let base = e0 * functionals::mu_star(1.0 / e0, report.beta, report.dim);
                    let pts: Vec<(f64, f64)> = report
                        .eps
                        .iter()
                        .map(|&e| {
                            (
                                e,
                                anchor * e * functionals::mu_star(1.0 / e, report.beta, report.dim)
                                    / base,
                            )
                        })
                        .collect();
                    series.push(Series {
                        label: "eps*mu*(1/eps) ref",
                        color: "#9467bd",
                        points: pts,
                        line: None,
                        dashed: true,
                    });
                }
            }
        }
        let j_points: Vec<(f64, f64)> = report
            .eps
            .iter()
            .zip(report.per_eps.iter())
            .map(|(e, s)| (*e, s.j0_hat.moment2.value))
            .collect();
        series.push(Series {
            label: "|J0-hat| m2",
            color: "#ff7f0e",
            points: j_points,
            line: report.j0_hat_fit.as_ref().map(|f| (f.slope, f.intercept)),
            dashed: false,
        });
    }
    render_chart(
        &format!("scaling at beta = {}, d = {}", report.beta, report.dim),
        &series,
    )
}

/// Text verdict for the scaling bands.
pub fn text_summary(report: &ScalingReport, slope_band: f64, e_decay_min: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "samples = {}, eps = {:?}, beta = {}, d = {}",
        report.n_samples, report.eps, report.beta, report.dim
    );
    let _ = writeln!(
        out,
        "abar = {:?} (clipped spectral mass {:.2e}, failed samples {})",
        report.abar, report.mean_clipped_mass, report.failed_samples
    );
    let ok_var = (report.var_j0_fit.slope - report.predicted_var_slope).abs() <= slope_band;
    let _ = writeln!(
        out,
        "Var J0 slope {:+.3} vs predicted {:+.3} (band {:.2}): {}",
        report.var_j0_fit.slope,
        report.predicted_var_slope,
        slope_band,
        if ok_var { "PASS" } else { "FAIL" }
    );
    let ok_hat = report.var_j0_hat_fit.slope.abs() <= slope_band;
    let _ = writeln!(
        out,
        "rescaled Var J0-hat slope {:+.3} (flat band {:.2}): {} [link defect {:.1e}]",
        report.var_j0_hat_fit.slope,
        slope_band,
        if ok_hat { "PASS" } else { "FAIL" },
        report.hat_link_defect
    );
    if let Some(fit) = &report.e_hat_fit {
        let ok_e = fit.slope >= e_decay_min;
        let _ = writeln!(
            out,
            "|E-hat| m2 decay slope {:+.3} (needs >= {:.2}, theory {:.1} up to logs): {}",
            fit.slope,
            e_decay_min,
            report.predicted_e_decay,
            if ok_e { "PASS" } else { "FAIL" }
        );
        if let Some((e_upper, j_lower)) = report.smallest_eps_separation {
            let ok_sep = e_upper < j_lower;
            let _ = writeln!(
                out,
                "subdominance at smallest eps: |E-hat| CI upper {:.3e} vs |J0-hat| CI lower {:.3e}: {}",
                e_upper,
                j_lower,
                if ok_sep { "PASS" } else { "FAIL" }
            );
        }
    }
    if report.heavy_tails {
        let _ = writeln!(out, "warning: heavy-tailed statistics flagged (kurtosis)");
    }
    out
}

/// Render `report.svg` plus the text summary from a run directory.
pub fn render_report(run_dir: &Path, slope_band: f64, e_decay_min: f64) -> Result<String> {
    let path = run_dir.join("scaling.json");
    if !path.exists() {
        return Err(Error::MissingReport(format!(
            "{} has no scaling.json",
            run_dir.display()
        )));
    }
    let text = std::fs::read_to_string(&path)?;
    let report: ScalingReport =
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let svg = scaling_chart(&report);
    std::fs::write(run_dir.join("report.svg"), &svg)?;
    Ok(text_summary(&report, slope_band, e_decay_min))
}
