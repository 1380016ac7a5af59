//! Periodic grid and the scalar/vector/tensor fields living on it.
//!
//! Fields are stored component-major: component `c` occupies the contiguous
//! block `data[c*vol .. (c+1)*vol]`, each block in row-major cell order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Discretized periodic domain: `dim` axes, side length `extent`, `n` cells per side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    extent: f64,
    n: usize,
}

impl TorusGrid {
    /// `n` must be a power of two so every transform stays fast, and the
    /// spacing must resolve the unit correlation scale (`h <= 1`).
    pub fn new(dim: usize, extent: f64, n: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("grid dimension must be >= 1".into()));
        }
        if !n.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "cells per side must be a power of two, got {n}"
            )));
        }
        if !(extent > 0.0) {
            return Err(Error::InvalidConfig("extent must be positive".into()));
        }
        let h = extent / n as f64;
        if h > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "spacing h = {h} exceeds the unit correlation scale; refine the grid"
            )));
        }
        Ok(Self { dim, extent, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Grid spacing `L / N`.
    pub fn spacing(&self) -> f64 {
        self.extent / self.n as f64
    }

    /// Total cell count `N^d`.
    pub fn vol(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Cell volume `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Row-major stride of `axis` (last axis is contiguous).
    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.dim - 1 - axis) as u32)
    }

    /// Index of the cell shifted by `step` cells along `axis`, with wrap.
    #[inline]
    pub fn shift(&self, idx: usize, axis: usize, step: isize) -> usize {
        let stride = self.stride(axis);
        let coord = (idx / stride) % self.n;
        let shifted = (coord as isize + step).rem_euclid(self.n as isize) as usize;
        idx - coord * stride + shifted * stride
    }

    /// Decompose a flat index into per-axis coordinates.
    pub fn coords(&self, idx: usize) -> Vec<usize> {
        let mut c = vec![0usize; self.dim];
        let mut rest = idx;
        for axis in (0..self.dim).rev() {
            c[axis] = rest % self.n;
            rest /= self.n;
        }
        c
    }

    /// Physical position of the cell center (cells sit at `j*h`).
    pub fn position(&self, idx: usize) -> Vec<f64> {
        let h = self.spacing();
        self.coords(idx).iter().map(|&j| j as f64 * h).collect()
    }

    /// Minimum-image distance between two positions on the torus.
    pub fn min_image_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let l = self.extent;
        x.iter()
            .zip(y)
            .map(|(a, b)| {
                let mut d = (a - b).rem_euclid(l);
                if d > l / 2.0 {
                    d = l - d;
                }
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_same(&self, other: &TorusGrid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{}^{} (L={}) vs {}^{} (L={})",
                self.n, self.dim, self.extent, other.n, other.dim, other.extent
            )));
        }
        Ok(())
    }
}

/// A field with `comps` real components per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: TorusGrid,
    comps: usize,
    data: Vec<f64>,
}

pub type ScalarField = Field;

impl Field {
    pub fn zeros(grid: TorusGrid, comps: usize) -> Self {
        Self {
            grid,
            comps,
            data: vec![0.0; comps * grid.vol()],
        }
    }

    pub fn scalar(grid: TorusGrid) -> Self {
        Self::zeros(grid, 1)
    }

    pub fn vector(grid: TorusGrid) -> Self {
        Self::zeros(grid, grid.dim())
    }

    pub fn tensor(grid: TorusGrid) -> Self {
        Self::zeros(grid, grid.dim() * grid.dim())
    }

    pub fn from_data(grid: TorusGrid, comps: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != comps * grid.vol() {
            return Err(Error::Format(format!(
                "field payload length {} does not match {} components on {} cells",
                data.len(),
                comps,
                grid.vol()
            )));
        }
        Ok(Self { grid, comps, data })
    }

    /// Build a scalar field by evaluating `f` at cell centers.
    pub fn scalar_from_fn(grid: TorusGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut field = Self::scalar(grid);
        for idx in 0..grid.vol() {
            field.data[idx] = f(&grid.position(idx));
        }
        field
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn comps(&self) -> usize {
        self.comps
    }

    /// Contiguous slice of one component.
    pub fn comp(&self, c: usize) -> &[f64] {
        let vol = self.grid.vol();
        &self.data[c * vol..(c + 1) * vol]
    }

    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        let vol = self.grid.vol();
        &mut self.data[c * vol..(c + 1) * vol]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, idx: usize) -> f64 {
        self.data[c * self.grid.vol() + idx]
    }

    #[inline]
    pub fn set(&mut self, c: usize, idx: usize, v: f64) {
        self.data[c * self.grid.vol() + idx] = v;
    }

    /// Mean of one component over the torus.
    pub fn comp_mean(&self, c: usize) -> f64 {
        crate::stats::kahan_sum(self.comp(c).iter().copied()) / self.grid.vol() as f64
    }

    /// Subtract the mean from every component.
    pub fn remove_mean(&mut self) {
        for c in 0..self.comps {
            let m = self.comp_mean(c);
            for v in self.comp_mut(c) {
                *v -= m;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Field) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Euclidean norm of the raw data (no cell-volume weight).
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Inner product with the `h^d` quadrature weight, Kahan-compensated.
pub fn inner(a: &Field, b: &Field) -> f64 {
    debug_assert_eq!(a.data.len(), b.data.len());
    let w = a.grid.cell_volume();
    crate::stats::kahan_sum(a.data.iter().zip(&b.data).map(|(x, y)| x * y)) * w
}
