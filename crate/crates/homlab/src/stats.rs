//! Compensated summation, moment estimation with jackknife intervals, and
//! log-log least-squares fits.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Kahan-compensated sum; order-stable and accurate for long accumulations.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn mean(values: &[f64]) -> f64 {
    kahan_sum(values.iter().copied()) / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    let m = mean(values);
    kahan_sum(values.iter().map(|v| (v - m) * (v - m))) / (n as f64 - 1.0)
}

/// q-th absolute moment `(mean |x|^q)^(1/q)`.
pub fn abs_moment(values: &[f64], q: u32) -> f64 {
    let n = values.len() as f64;
    (kahan_sum(values.iter().map(|v| v.abs().powi(q as i32))) / n).powf(1.0 / q as f64)
}

/// A point estimate with a leave-one-out jackknife confidence interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JackknifeEstimate {
    pub value: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

const CI_Z: f64 = 1.959963984540054; // two-sided 95%

/// Jackknife a statistic of a sample: recompute on each leave-one-out subset.
pub fn jackknife(values: &[f64], stat: impl Fn(&[f64]) -> f64) -> JackknifeEstimate {
    let n = values.len();
    let full = stat(values);
    let mut loo = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(n - 1);
    for i in 0..n {
        buf.clear();
        buf.extend_from_slice(&values[..i]);
        buf.extend_from_slice(&values[i + 1..]);
        loo.push(stat(&buf));
    }
    let loo_mean = mean(&loo);
    let var = kahan_sum(loo.iter().map(|v| (v - loo_mean) * (v - loo_mean)))
        * (n as f64 - 1.0)
        / n as f64;
    let se = var.max(0.0).sqrt();
    JackknifeEstimate {
        value: full,
        std_error: se,
        ci_lower: full - CI_Z * se,
        ci_upper: full + CI_Z * se,
    }
}

/// Per-statistic summary of one ensemble of functional values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentSummary {
    pub n: usize,
    pub mean: f64,
    pub variance: JackknifeEstimate,
    pub moment2: JackknifeEstimate,
    pub moment4: JackknifeEstimate,
    /// Excess kurtosis well above the Gaussian value flags heavy tails.
    pub heavy_tail: bool,
}

pub const MIN_SAMPLES: usize = 8;

pub fn estimate_moments(values: &[f64]) -> Result<MomentSummary> {
    if values.len() < MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            got: values.len(),
            need: MIN_SAMPLES,
        });
    }
    let var = jackknife(values, variance);
    let m2 = jackknife(values, |v| abs_moment(v, 2));
    let m4 = jackknife(values, |v| abs_moment(v, 4));
    let m = mean(values);
    let v = variance(values);
    let kurt = if v > 0.0 {
        kahan_sum(values.iter().map(|x| (x - m).powi(4))) / (values.len() as f64 * v * v)
    } else {
        3.0
    };
    Ok(MomentSummary {
        n: values.len(),
        mean: m,
        variance: var,
        moment2: m2,
        moment4: m4,
        heavy_tail: kurt > 9.0,
    })
}

/// Least squares fit of `log(stat)` against `log(eps)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    /// Per-point residuals of the log-log fit, in input order.
    pub residuals: Vec<f64>,
    pub slope_std_error: f64,
}

pub fn fit_scaling(eps: &[f64], stats: &[f64]) -> Result<ScalingFit> {
    if eps.len() != stats.len() || eps.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "need at least 3 matched points, got {}",
            eps.len().min(stats.len())
        )));
    }
    if let Some(bad) = stats.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::DegenerateFit(format!(
            "nonpositive statistic {bad} cannot be log-fit"
        )));
    }
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = stats.iter().map(|s| s.ln()).collect();
    Ok(linear_fit(&xs, &ys))
}

/// Plain least squares on already-transformed coordinates.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> ScalingFit {
    let n = xs.len() as f64;
    let xm = mean(xs);
    let ym = mean(ys);
    let sxx = kahan_sum(xs.iter().map(|x| (x - xm) * (x - xm)));
    let sxy = kahan_sum(xs.iter().zip(ys).map(|(x, y)| (x - xm) * (y - ym)));
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let residuals: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| y - (intercept + slope * x))
        .collect();
    let dof = (n - 2.0).max(1.0);
    let s2 = kahan_sum(residuals.iter().map(|r| r * r)) / dof;
    ScalingFit {
        slope,
        intercept,
        residuals,
        slope_std_error: (s2 / sxx).sqrt(),
    }
}
