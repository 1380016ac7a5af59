//! Smooth compactly supported test functions on the slow torus.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BumpKind {
    /// amplitude * exp(1 - 1/(1 - |x-c|^2/r^2)) inside the ball, 0 outside.
    SmoothBump,
    /// Gaussian with scale r/3, truncated at |x-c| = r.
    TruncatedGaussian,
}

/// One scalar component: a bump of the given kind, center, radius, amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub kind: BumpKind,
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
}

impl BumpSpec {
    pub fn eval(&self, x: &[f64], torus_extent: f64) -> f64 {
        let mut r2 = 0.0;
        for (xi, ci) in x.iter().zip(&self.center) {
            let mut dd = (xi - ci).rem_euclid(torus_extent);
            if dd > torus_extent / 2.0 {
                dd = torus_extent - dd;
            }
            r2 += dd * dd;
        }
        let s2 = r2 / (self.radius * self.radius);
        if s2 >= 1.0 {
            return 0.0;
        }
        match self.kind {
            BumpKind::SmoothBump => self.amplitude * (1.0 - 1.0 / (1.0 - s2)).exp(),
            BumpKind::TruncatedGaussian => self.amplitude * (-4.5 * s2).exp(),
        }
    }
}

/// Vector (d components) or tensor (d x d components) test function; entries
/// may be empty bumps (zero amplitude).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionSpec {
    pub components: Vec<Option<BumpSpec>>,
}

impl TestFunctionSpec {
    /// Vector test function with a single nonzero component.
    pub fn vector_bump(dim: usize, comp: usize, bump: BumpSpec) -> Self {
        let mut components = vec![None; dim];
        components[comp] = Some(bump);
        Self { components }
    }

    /// Tensor test function with a single nonzero (i, j) entry.
    pub fn tensor_bump(dim: usize, i: usize, j: usize, bump: BumpSpec) -> Self {
        let mut components = vec![None; dim * dim];
        components[i * dim + j] = Some(bump);
        Self { components }
    }

    pub fn comps(&self) -> usize {
        self.components.len()
    }

    pub fn eval_comp(&self, c: usize, x: &[f64], torus_extent: f64) -> f64 {
        self.components[c]
            .as_ref()
            .map_or(0.0, |b| b.eval(x, torus_extent))
    }

    /// Every bump must sit strictly inside the torus: at least one radius of
    /// clearance from the wrap seam after centering.
    pub fn validate(&self, torus_extent: f64) -> Result<()> {
        for bump in self.components.iter().flatten() {
            if !(bump.radius > 0.0) {
                return Err(Error::InvalidConfig("bump radius must be positive".into()));
            }
            if 2.0 * bump.radius > torus_extent / 2.0 {
                return Err(Error::Resolution(format!(
                    "bump radius {} too large for torus extent {torus_extent}",
                    bump.radius
                )));
            }
            for c in &bump.center {
                if *c < 0.0 || *c >= torus_extent {
                    return Err(Error::InvalidConfig(format!(
                        "bump center {c} outside the torus [0, {torus_extent})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn max_radius(&self) -> f64 {
        self.components
            .iter()
            .flatten()
            .map(|b| b.radius)
            .fold(0.0, f64::max)
    }
}
